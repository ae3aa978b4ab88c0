//! Branching deep-Q agent: a shared trunk over the observation components,
//! one Q head per sub-action, FIFO replay and a periodically synced target
//! network.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{JointAction, ObsDims, Observation};
use crate::error::{invalid, Error, Result};
use crate::neural::{
    Activation, ForwardCache, Gradient, InputSpec, LayerSpec, Network, NetworkParams, NetworkSpec, Sgd,
};

/// `epsilon(step) = max(floor, base^step)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpsilonSchedule {
    pub floor: f64,
    pub base: f64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self {
            floor: 0.001,
            base: 0.99,
        }
    }
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        let decayed = if step > i32::MAX as u64 {
            0.0
        } else {
            self.base.powi(step as i32)
        };
        decayed.max(self.floor).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Square of the summed per-branch TD errors.
    #[default]
    SummedTd,
    /// Sum of the per-branch squared TD errors.
    SeparateSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GruMode {
    /// Channel: one step per UE; coefficients: one step per element.
    #[default]
    Sequence,
    /// Every component fed as a single step.
    SingleStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub gamma: f64,
    pub lr: f64,
    pub momentum: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub target_period: u64,
    pub epsilon: EpsilonSchedule,
    pub hidden: usize,
    pub gru_mode: GruMode,
    pub loss_mode: LossMode,
    /// `false` replaces the two heads by one head over the joint action set.
    pub branching: bool,
    /// Multiplier applied to the estimated channel before it enters the net.
    pub channel_scale: f64,
    /// Clip the global gradient norm; `0` disables.
    pub grad_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            lr: 0.001,
            momentum: 0.0,
            buffer_capacity: 10_000,
            batch_size: 8,
            target_period: 20,
            epsilon: EpsilonSchedule::default(),
            hidden: 64,
            gru_mode: GruMode::Sequence,
            loss_mode: LossMode::SummedTd,
            branching: true,
            channel_scale: 0.1,
            grad_clip: 0.0,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("learning rate must be >= 0 and momentum in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.batch_size > self.buffer_capacity {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={}",
                self.batch_size, self.buffer_capacity
            )));
        }
        if self.target_period == 0 || self.hidden == 0 {
            return Err(Error::Config("target period and hidden width must be positive".into()));
        }
        if !(self.channel_scale > 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::Config("channel scale must be positive, gradient clip non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub state: Observation,
    pub action: JointAction,
    pub reward: f64,
    pub next_state: Observation,
}

/// Fixed-capacity FIFO of experiences.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn store(&mut self, exp: Experience) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(exp);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn get(&self, index: usize) -> Option<&Experience> {
        self.items.get(index)
    }

    /// Uniform with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, count: usize, rng: &mut R) -> Vec<&'a Experience> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| &self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

/// Per-branch Q values.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchQ {
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
}

/// Q values as produced by either head layout.
#[derive(Debug, Clone, PartialEq)]
pub enum QValues {
    Branched(BranchQ),
    /// Flattened `increments x amplitudes`, amplitude fastest.
    Joint { q: Vec<f64>, amplitudes: usize },
}

impl QValues {
    /// Number of Q values evaluated for one decision.
    pub fn evaluated(&self) -> usize {
        match self {
            QValues::Branched(b) => b.q1.len() + b.q2.len(),
            QValues::Joint { q, .. } => q.len(),
        }
    }
}

/// First index of the maximum; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-branch epsilon-greedy; the two branches draw independently.
pub fn select_action<R: Rng + ?Sized>(q: &BranchQ, epsilon: f64, rng: &mut R) -> JointAction {
    let pick = |values: &[f64], rng: &mut R| {
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            rng.random_range(0..values.len())
        } else {
            argmax(values)
        }
    };
    let increment = pick(&q.q1, rng);
    let amplitude = pick(&q.q2, rng);
    JointAction::new(increment, amplitude)
}

/// Epsilon-greedy over whichever head layout produced `q`.
pub fn select_from<R: Rng + ?Sized>(q: &QValues, epsilon: f64, rng: &mut R) -> JointAction {
    match q {
        QValues::Branched(b) => select_action(b, epsilon, rng),
        QValues::Joint { q, amplitudes } => {
            let flat = if epsilon > 0.0 && rng.random::<f64>() < epsilon {
                rng.random_range(0..q.len())
            } else {
                argmax(q)
            };
            JointAction::from_flat(flat, *amplitudes)
        }
    }
}

/// The Q network together with its observation encoding.
#[derive(Debug, Clone)]
pub struct QNetwork {
    net: Network,
    dims: ObsDims,
    increments: usize,
    amplitudes: usize,
    branching: bool,
    gru_mode: GruMode,
    channel_scale: f64,
}

impl QNetwork {
    pub fn new(cfg: &AgentConfig, dims: ObsDims, increments: usize, amplitudes: usize) -> Result<Self> {
        if increments == 0 || amplitudes == 0 {
            return Err(invalid("action sets must be non-empty"));
        }
        let h = cfg.hidden;
        let (ch_steps, ch_feats) = dims.channel_sequence();
        let (co_steps, co_feats) = dims.coefficient_sequence();
        let shape = |steps: usize, feats: usize| match cfg.gru_mode {
            GruMode::Sequence => (steps, feats),
            GruMode::SingleStep => (1, steps * feats),
        };
        let component = |name: &str, (steps, features): (usize, usize)| InputSpec {
            name: name.into(),
            steps,
            features,
            layers: vec![
                LayerSpec::Gru { width: h },
                LayerSpec::Fc {
                    width: h,
                    activation: Activation::Relu,
                },
            ],
        };
        let head = |out: usize| {
            vec![
                LayerSpec::Fc {
                    width: h,
                    activation: Activation::Relu,
                },
                LayerSpec::Fc {
                    width: out,
                    activation: Activation::Linear,
                },
            ]
        };
        let heads = if cfg.branching {
            vec![head(increments), head(amplitudes)]
        } else {
            vec![head(increments * amplitudes)]
        };
        let net = Network::new(NetworkSpec {
            inputs: vec![
                component("channel", shape(ch_steps, ch_feats)),
                component("reflect", shape(co_steps, co_feats)),
                component("refract", shape(co_steps, co_feats)),
            ],
            trunk: vec![],
            heads,
        })?;
        Ok(Self {
            net,
            dims,
            increments,
            amplitudes,
            branching: cfg.branching,
            gru_mode: cfg.gru_mode,
            channel_scale: cfg.channel_scale,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn gru_mode(&self) -> GruMode {
        self.gru_mode
    }

    pub fn is_branching(&self) -> bool {
        self.branching
    }

    /// `(|A1|, |A2|)`.
    pub fn action_sizes(&self) -> (usize, usize) {
        (self.increments, self.amplitudes)
    }

    /// Sequence-ordered inputs for the three components.
    pub fn encode(&self, obs: &Observation) -> Result<[Vec<f64>; 3]> {
        if obs.dims != self.dims {
            return Err(invalid("observation dimensions do not match the network"));
        }
        let mut channel = obs.channel_sequence();
        channel.iter_mut().for_each(|x| *x *= self.channel_scale);
        Ok([
            channel,
            Observation::coefficient_sequence(&obs.phi_r, &obs.dims),
            Observation::coefficient_sequence(&obs.phi_t, &obs.dims),
        ])
    }

    fn wrap(&self, mut heads: Vec<Vec<f64>>) -> QValues {
        if self.branching {
            let q2 = heads.pop().unwrap_or_default();
            let q1 = heads.pop().unwrap_or_default();
            QValues::Branched(BranchQ { q1, q2 })
        } else {
            QValues::Joint {
                q: heads.pop().unwrap_or_default(),
                amplitudes: self.amplitudes,
            }
        }
    }

    pub fn q_values(&self, params: &NetworkParams, obs: &Observation) -> Result<QValues> {
        let x = self.encode(obs)?;
        let out = self.net.predict(params, &[&x[0], &x[1], &x[2]])?;
        Ok(self.wrap(out))
    }

    fn forward(&self, params: &NetworkParams, obs: &Observation) -> Result<(QValues, ForwardCache)> {
        let x = self.encode(obs)?;
        let (out, cache) = self.net.forward(params, &[&x[0], &x[1], &x[2]])?;
        Ok((self.wrap(out), cache))
    }
}

/// Decision path shared by the learning agent and the deployed copy.
pub fn act_only<R: Rng + ?Sized>(
    qnet: &QNetwork,
    params: &NetworkParams,
    obs: &Observation,
    epsilon: f64,
    rng: &mut R,
) -> Result<JointAction> {
    let q = qnet.q_values(params, obs)?;
    Ok(select_from(&q, epsilon, rng))
}

/// TD loss over `batch` and its gradient w.r.t. the online parameters.
pub fn compute_loss(
    qnet: &QNetwork,
    params: &NetworkParams,
    target: &NetworkParams,
    batch: &[&Experience],
    gamma: f64,
    mode: LossMode,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = Gradient::zeros_like(params);
    let mut loss = 0.0;
    for exp in batch {
        if !exp.reward.is_finite() {
            return Err(Error::Numerical("non-finite reward in batch".into()));
        }
        let next = qnet.q_values(target, &exp.next_state)?;
        let (q, cache) = qnet.forward(params, &exp.state)?;
        match (q, next) {
            (QValues::Branched(q), QValues::Branched(next)) => {
                let (a1, a2) = (exp.action.increment, exp.action.amplitude);
                if a1 >= q.q1.len() || a2 >= q.q2.len() {
                    return Err(invalid(format!("action {:?} outside the heads", exp.action)));
                }
                let best1 = next.q1[argmax(&next.q1)];
                let best2 = next.q2[argmax(&next.q2)];
                let d1 = exp.reward + gamma * best1 - q.q1[a1];
                let d2 = exp.reward + gamma * best2 - q.q2[a2];
                let (g1, g2) = match mode {
                    LossMode::SummedTd => {
                        loss += (d1 + d2) * (d1 + d2) * scale;
                        let g = -2.0 * (d1 + d2) * scale;
                        (g, g)
                    }
                    LossMode::SeparateSquares => {
                        loss += (d1 * d1 + d2 * d2) * scale;
                        (-2.0 * d1 * scale, -2.0 * d2 * scale)
                    }
                };
                let mut dq1 = vec![0.0; q.q1.len()];
                let mut dq2 = vec![0.0; q.q2.len()];
                dq1[a1] = g1;
                dq2[a2] = g2;
                qnet.net.backward(params, &cache, &[Some(&dq1), Some(&dq2)], &mut grad)?;
            }
            (QValues::Joint { q, amplitudes }, QValues::Joint { q: next, .. }) => {
                let a = exp.action.flat(amplitudes);
                if a >= q.len() || exp.action.amplitude >= amplitudes {
                    return Err(invalid(format!("action {:?} outside the head", exp.action)));
                }
                let d = exp.reward + gamma * next[argmax(&next)] - q[a];
                loss += d * d * scale;
                let mut dq = vec![0.0; q.len()];
                dq[a] = -2.0 * d * scale;
                qnet.net.backward(params, &cache, &[Some(&dq)], &mut grad)?;
            }
            _ => unreachable!("online and target share one head layout"),
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainDiagnostics {
    pub step: u64,
    pub loss: f64,
    /// Gradient norm before any clipping.
    pub grad_norm: f64,
    pub epsilon: f64,
    pub buffer_size: usize,
    pub synced: bool,
}

/// The learning agent: online and target parameters, replay and counters.
#[derive(Debug, Clone)]
pub struct DeepQAgent {
    cfg: AgentConfig,
    qnet: QNetwork,
    online: NetworkParams,
    target: NetworkParams,
    buffer: ReplayBuffer,
    opt: Sgd,
    train_steps: u64,
    decisions: u64,
    skipped: u64,
    last_loss: f64,
}

impl DeepQAgent {
    pub fn new<R: Rng + ?Sized>(
        cfg: AgentConfig,
        dims: ObsDims,
        increments: usize,
        amplitudes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let qnet = QNetwork::new(&cfg, dims, increments, amplitudes)?;
        let online = qnet.network().init_params(rng);
        let target = online.clone();
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            opt: Sgd::new(cfg.lr, cfg.momentum),
            qnet,
            online,
            target,
            train_steps: 0,
            decisions: 0,
            skipped: 0,
            last_loss: f64::NAN,
            cfg,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.cfg
    }

    pub fn qnet(&self) -> &QNetwork {
        &self.qnet
    }

    pub fn online(&self) -> &NetworkParams {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut NetworkParams {
        &mut self.online
    }

    pub fn target(&self) -> &NetworkParams {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    pub fn decisions(&self) -> u64 {
        self.decisions
    }

    /// Train calls skipped because the buffer held fewer than a batch.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn last_loss(&self) -> f64 {
        self.last_loss
    }

    pub fn epsilon(&self) -> f64 {
        self.cfg.epsilon.at(self.decisions)
    }

    pub fn q_values(&self, obs: &Observation) -> Result<QValues> {
        self.qnet.q_values(&self.online, obs)
    }

    /// Epsilon-greedy decision; advances the exploration schedule.
    pub fn act<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<JointAction> {
        let eps = self.epsilon();
        self.decisions += 1;
        act_only(&self.qnet, &self.online, obs, eps, rng)
    }

    pub fn store(&mut self, exp: Experience) {
        self.buffer.store(exp);
    }

    /// One SGD step on a uniformly sampled batch; target sync every
    /// `target_period` steps. Returns `None` when the buffer is too small.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<TrainDiagnostics>> {
        if self.buffer.len() < self.cfg.batch_size {
            self.skipped += 1;
            return Ok(None);
        }
        let batch = self.buffer.sample(self.cfg.batch_size, rng);
        let (loss, mut grad) = compute_loss(
            &self.qnet,
            &self.online,
            &self.target,
            &batch,
            self.cfg.gamma,
            self.cfg.loss_mode,
        )?;
        let norm = grad.norm();
        if self.cfg.grad_clip > 0.0 {
            if norm > self.cfg.grad_clip {
                grad.scale(self.cfg.grad_clip / norm);
            }
        }
        self.opt.step(&mut self.online, &grad)?;
        self.train_steps += 1;
        let synced = self.train_steps % self.cfg.target_period == 0;
        if synced {
            self.target.copy_from(&self.online)?;
        }
        self.last_loss = loss;
        Ok(Some(TrainDiagnostics {
            step: self.train_steps,
            loss,
            grad_norm: norm,
            epsilon: self.epsilon(),
            buffer_size: self.buffer.len(),
            synced,
        }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.online.save(path)
    }

    pub fn load_online(&mut self, path: &Path) -> Result<()> {
        let p = NetworkParams::load(path)?;
        self.online.copy_from(&p)?;
        Ok(())
    }
}

/// The deployed copy: decides only, never trains.
#[derive(Debug, Clone)]
pub struct PhysicalAgent {
    qnet: QNetwork,
    params: NetworkParams,
    epsilon: EpsilonSchedule,
    decisions: u64,
}

impl PhysicalAgent {
    pub fn new(qnet: QNetwork, params: NetworkParams, epsilon: EpsilonSchedule) -> Self {
        Self {
            qnet,
            params,
            epsilon,
            decisions: 0,
        }
    }

    /// Replaces the evaluation parameters with a snapshot.
    pub fn deliver(&mut self, params: &NetworkParams) -> Result<()> {
        self.params.copy_from(params)
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn qnet(&self) -> &QNetwork {
        &self.qnet
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.at(self.decisions)
    }

    pub fn act<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<JointAction> {
        let eps = self.epsilon();
        self.decisions += 1;
        act_only(&self.qnet, &self.params, obs, eps, rng)
    }
}

/// Writes training diagnostics as CSV (`step,loss,grad_norm,epsilon,buffer_size`).
pub fn write_diagnostics<W: Write>(out: W, rows: &[TrainDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss", "grad_norm", "epsilon", "buffer_size"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            r.epsilon.to_string(),
            r.buffer_size.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

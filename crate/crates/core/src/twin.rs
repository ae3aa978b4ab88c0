//! Learned surrogate of the live system: a rolling dataset of logged slots,
//! a next-channel predictor, a reward predictor and a virtual environment
//! built from them.

use std::collections::VecDeque;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, Environment, IosEnv, JointAction, ObsDims, Observation, RewardConfig, StepOutcome};
use crate::error::{invalid, Error, Result};
use crate::ios::{coefficient_matrices, ActionCatalog, PhaseState};
use crate::neural::{
    mse_loss, Activation, Gradient, InputSpec, LayerSpec, Network, NetworkParams, NetworkSpec, Sgd,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    /// Dataset capacity.
    pub dataset_capacity: usize,
    /// Records per calibration pass.
    pub calib_batch: usize,
    /// Slots between calibrations.
    pub calib_period: usize,
    pub lr_state: f64,
    pub lr_reward: f64,
    pub hidden: usize,
    /// Mini-batch size of the initial training.
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    /// Multiplier applied to channel entries on the way in and out.
    pub channel_scale: f64,
    /// Regress the coefficient tensors too instead of composing them.
    pub full_state: bool,
}

impl Default for TwinConfig {
    fn default() -> Self {
        Self {
            dataset_capacity: 1000,
            calib_batch: 24,
            calib_period: 10,
            lr_state: 0.001,
            lr_reward: 0.001,
            hidden: 64,
            batch_size: 24,
            holdout_fraction: 0.2,
            patience: 10,
            max_epochs: 500,
            channel_scale: 0.1,
            full_state: false,
        }
    }
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.calib_batch > self.dataset_capacity && self.dataset_capacity > 0 {
            return Err(Error::Config(format!(
                "calibration batch {} exceeds dataset capacity {}",
                self.calib_batch, self.dataset_capacity
            )));
        }
        if !(self.lr_state >= 0.0 && self.lr_reward >= 0.0) {
            return Err(Error::Config("twin learning rates must be non-negative".into()));
        }
        if self.hidden == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("twin widths, batch size and epoch cap must be positive".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) || !(self.channel_scale > 0.0) {
            return Err(Error::Config("holdout fraction must be in (0, 1), channel scale positive".into()));
        }
        Ok(())
    }
}

/// One logged slot: the channel estimate seen before acting, the action and
/// the per-UE rates it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinRecord {
    /// `[2][N][K]` planes.
    pub h_hat: Vec<f64>,
    pub increment_index: usize,
    pub increment: Vec<Complex64>,
    pub amplitude_index: usize,
    pub beta_r: Vec<f64>,
    pub rates: Vec<f64>,
    /// First record after a reset: surface at identity phases, amplitude 0.
    pub fresh: bool,
}

impl TwinRecord {
    pub fn from_step(state: &Observation, action: JointAction, catalog: &ActionCatalog, step: &StepOutcome) -> Result<Self> {
        let increment = catalog
            .phase_increments
            .get(action.increment)
            .ok_or_else(|| invalid("increment index outside the catalog"))?
            .clone();
        let amp = catalog
            .amplitude_options
            .get(action.amplitude)
            .ok_or_else(|| invalid("amplitude index outside the catalog"))?;
        Ok(Self {
            h_hat: state.h_hat.clone(),
            increment_index: action.increment,
            increment,
            amplitude_index: action.amplitude,
            beta_r: amp.beta_r().to_vec(),
            rates: step.link.rate.clone(),
            fresh: false,
        })
    }

    pub fn action(&self) -> JointAction {
        JointAction::new(self.increment_index, self.amplitude_index)
    }

    pub fn sum_rate(&self) -> f64 {
        self.rates.iter().sum()
    }
}

/// FIFO of records. Surface coefficients are not stored; they are rebuilt
/// by replaying increments from the state before the oldest record.
#[derive(Debug, Clone)]
pub struct TwinDataset {
    capacity: usize,
    records: VecDeque<TwinRecord>,
    base_phases: Option<PhaseState>,
    base_amplitude: usize,
    next_fresh: bool,
}

impl TwinDataset {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
            base_phases: None,
            base_amplitude: 0,
            next_fresh: true,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn records(&self) -> impl Iterator<Item = &TwinRecord> {
        self.records.iter()
    }

    pub fn get(&self, index: usize) -> Option<&TwinRecord> {
        self.records.get(index)
    }

    /// The next collected record follows a reset.
    pub fn begin_segment(&mut self) {
        self.next_fresh = true;
    }

    pub fn collect(&mut self, mut record: TwinRecord) {
        if self.capacity == 0 {
            return;
        }
        if self.next_fresh {
            record.fresh = true;
            self.next_fresh = false;
        }
        if self.records.len() == self.capacity {
            if let Some(old) = self.records.pop_front() {
                let start = if old.fresh {
                    PhaseState::identity(old.increment.len())
                } else {
                    self.base_phases
                        .clone()
                        .unwrap_or_else(|| PhaseState::identity(old.increment.len()))
                };
                self.base_phases = start.apply_increment(&old.increment).ok();
                self.base_amplitude = old.amplitude_index;
            }
        }
        self.records.push_back(record);
    }

    /// Surface state `(phases, amplitude index)` in force before each record.
    pub fn surface_states(&self) -> Result<Vec<(PhaseState, usize)>> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut cur: Option<(PhaseState, usize)> = None;
        for r in &self.records {
            let before = if r.fresh {
                (PhaseState::identity(r.increment.len()), 0)
            } else {
                match cur.take() {
                    Some(s) => s,
                    None => (
                        self.base_phases
                            .clone()
                            .ok_or_else(|| Error::State("dataset lost the state before its oldest record".into()))?,
                        self.base_amplitude,
                    ),
                }
            };
            let after = (before.0.apply_increment(&r.increment)?, r.amplitude_index);
            out.push(before);
            cur = Some(after);
        }
        Ok(out)
    }

    /// CSV with a header naming every column:
    /// `fresh, increment_index, amplitude_index, h_hat_*, increment_re_*,
    /// increment_im_*, beta_r_*, rate_*`.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let Some(first) = self.records.front() else {
            w.write_record(["fresh", "increment_index", "amplitude_index"])?;
            w.flush()?;
            return Ok(());
        };
        let mut header = vec!["fresh".to_string(), "increment_index".into(), "amplitude_index".into()];
        header.extend((0..first.h_hat.len()).map(|i| format!("h_hat_{i}")));
        header.extend((0..first.increment.len()).map(|i| format!("increment_re_{i}")));
        header.extend((0..first.increment.len()).map(|i| format!("increment_im_{i}")));
        header.extend((0..first.beta_r.len()).map(|i| format!("beta_r_{i}")));
        header.extend((0..first.rates.len()).map(|i| format!("rate_{i}")));
        w.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            // an exported window always starts a segment
            let fresh = r.fresh || i == 0;
            let mut row = vec![
                u8::from(fresh).to_string(),
                r.increment_index.to_string(),
                r.amplitude_index.to_string(),
            ];
            row.extend(r.h_hat.iter().map(|v| v.to_string()));
            row.extend(r.increment.iter().map(|z| z.re.to_string()));
            row.extend(r.increment.iter().map(|z| z.im.to_string()));
            row.extend(r.beta_r.iter().map(|v| v.to_string()));
            row.extend(r.rates.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn import_csv(path: &Path, capacity: usize) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let (nh, ni, nb, nr) = (count("h_hat_"), count("increment_re_"), count("beta_r_"), count("rate_"));
        if count("increment_im_") != ni {
            return Err(Error::Config("increment columns are unbalanced".into()));
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad dataset value '{s}': {e}")))
        };
        let mut ds = TwinDataset::new(capacity);
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 + nh + 2 * ni + nb + nr {
                return Err(Error::Config("dataset row has the wrong number of columns".into()));
            }
            let vals: Vec<f64> = rec.iter().map(parse).collect::<Result<_>>()?;
            let mut at = 3;
            let mut take = |n: usize| {
                let s = vals[at..at + n].to_vec();
                at += n;
                s
            };
            let h_hat = take(nh);
            let re = take(ni);
            let im = take(ni);
            let beta_r = take(nb);
            let rates = take(nr);
            let record = TwinRecord {
                h_hat,
                increment_index: vals[1] as usize,
                increment: re.iter().zip(&im).map(|(a, b)| Complex64::new(*a, *b)).collect(),
                amplitude_index: vals[2] as usize,
                beta_r,
                rates,
                fresh: vals[0] != 0.0,
            };
            if record.fresh {
                ds.begin_segment();
            }
            ds.collect(record);
        }
        Ok(ds)
    }
}

/// Supervised pair built from two consecutive records.
#[derive(Debug, Clone)]
struct Sample {
    input: Vec<f64>,
    next_state: Vec<f64>,
    reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TwinDiagnostics {
    /// Physical slot (0 for the initial training).
    pub slot: usize,
    pub epochs: usize,
    pub state_loss: f64,
    pub reward_loss: f64,
    pub state_holdout: f64,
    pub reward_holdout: f64,
    /// Holdout loss of the best constant predictor (the target variance).
    pub state_holdout_baseline: f64,
    pub reward_holdout_baseline: f64,
}

/// Per-sample squared distance to the mean target, summed over outputs.
fn target_variance(samples: &[&Sample]) -> (f64, f64) {
    let n = samples.len() as f64;
    if samples.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let width = samples[0].next_state.len();
    let mut mean = vec![0.0; width];
    let mut mean_r = 0.0;
    for s in samples {
        for (m, v) in mean.iter_mut().zip(&s.next_state) {
            *m += v / n;
        }
        mean_r += s.reward / n;
    }
    let state = samples
        .iter()
        .map(|s| s.next_state.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n;
    let reward = samples.iter().map(|s| (s.reward - mean_r).powi(2)).sum::<f64>() / n;
    (state, reward)
}

/// Both predictors plus the fixed context they need.
#[derive(Debug, Clone)]
pub struct Twin {
    cfg: TwinConfig,
    dims: ObsDims,
    catalog: ActionCatalog,
    state_net: Network,
    reward_net: Network,
    state_params: NetworkParams,
    reward_params: NetworkParams,
    state_opt: Sgd,
    reward_opt: Sgd,
    trained: bool,
}

#[derive(Serialize, Deserialize)]
struct TwinCheckpoint {
    format: String,
    state: NetworkParams,
    reward: NetworkParams,
}

impl Twin {
    pub fn new<R: Rng + ?Sized>(cfg: TwinConfig, env: &IosEnv, rng: &mut R) -> Result<Self> {
        Self::with_parts(cfg, env.config(), env.catalog().clone(), rng)
    }

    pub fn with_parts<R: Rng + ?Sized>(
        cfg: TwinConfig,
        env_cfg: &EnvConfig,
        catalog: ActionCatalog,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let dims = env_cfg.observation_dims();
        let m = dims.elements;
        let input = dims.channel_len() + 4 * m + catalog.increments() + m;
        let h = cfg.hidden;
        let state_out = if cfg.full_state {
            dims.channel_len() + 2 * dims.coefficient_len()
        } else {
            dims.channel_len()
        };
        let fc = |width, activation| LayerSpec::Fc { width, activation };
        let state_net = Network::new(NetworkSpec {
            inputs: vec![InputSpec {
                name: "transition".into(),
                steps: 1,
                features: input,
                layers: vec![LayerSpec::Gru { width: h }, fc(h, Activation::Relu)],
            }],
            trunk: vec![],
            heads: vec![vec![fc(state_out, Activation::Linear)]],
        })?;
        let reward_net = Network::new(NetworkSpec {
            inputs: vec![InputSpec {
                name: "transition".into(),
                steps: 1,
                features: input,
                layers: vec![fc(h, Activation::Relu)],
            }],
            trunk: vec![LayerSpec::Residual {
                inner: vec![fc(h, Activation::Relu), fc(h, Activation::Linear)],
            }],
            heads: vec![vec![fc(1, Activation::Linear)]],
        })?;
        let state_params = state_net.init_params(rng);
        let reward_params = reward_net.init_params(rng);
        Ok(Self {
            state_opt: Sgd::new(cfg.lr_state, 0.0),
            reward_opt: Sgd::new(cfg.lr_reward, 0.0),
            cfg,
            dims,
            catalog,
            state_net,
            reward_net,
            state_params,
            reward_params,
            trained: false,
        })
    }

    pub fn config(&self) -> &TwinConfig {
        &self.cfg
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn state_params(&self) -> &NetworkParams {
        &self.state_params
    }

    pub fn reward_params(&self) -> &NetworkParams {
        &self.reward_params
    }

    pub fn reward_params_mut(&mut self) -> &mut NetworkParams {
        &mut self.reward_params
    }

    pub fn state_params_mut(&mut self) -> &mut NetworkParams {
        &mut self.state_params
    }

    /// Network input for `(state, action)`: scaled channel, coefficient
    /// diagonals, one-hot increment and the chosen reflection amplitudes.
    fn encode(&self, h_hat: &[f64], phases: &PhaseState, amplitude: usize, action: JointAction) -> Result<Vec<f64>> {
        let n1 = self.catalog.increments();
        let amp = self
            .catalog
            .amplitude_options
            .get(action.amplitude)
            .ok_or_else(|| invalid("amplitude index outside the catalog"))?;
        if action.increment >= n1 {
            return Err(invalid("increment index outside the catalog"));
        }
        if h_hat.len() != self.dims.channel_len() {
            return Err(invalid("channel tensor has the wrong size"));
        }
        let current = self
            .catalog
            .amplitude_options
            .get(amplitude)
            .ok_or_else(|| invalid("state amplitude index outside the catalog"))?;
        let (r, t) = coefficient_matrices(phases, current)?;
        let mut x = Vec::with_capacity(h_hat.len() + 4 * r.len() + n1 + amp.len());
        x.extend(h_hat.iter().map(|v| v * self.cfg.channel_scale));
        for d in [&r, &t] {
            x.extend(d.iter().map(|z| z.re));
            x.extend(d.iter().map(|z| z.im));
        }
        x.extend((0..n1).map(|i| if i == action.increment { 1.0 } else { 0.0 }));
        x.extend_from_slice(amp.beta_r());
        Ok(x)
    }

    fn encode_obs(&self, state: &Observation, action: JointAction) -> Result<Vec<f64>> {
        if state.dims != self.dims {
            return Err(invalid("observation dimensions do not match the twin"));
        }
        self.encode(&state.h_hat, &state.phases, state.amplitude_index, action)
    }

    /// Next observation: learned channel, analytically composed coefficients.
    pub fn predict_next_state(&self, state: &Observation, action: JointAction) -> Result<Observation> {
        let x = self.encode_obs(state, action)?;
        let out = self.state_net.predict(&self.state_params, &[&x])?.remove(0);
        let phases = state.phases.apply_increment(&self.catalog.phase_increments[action.increment])?;
        let amp = &self.catalog.amplitude_options[action.amplitude];
        let (r, t) = coefficient_matrices(&phases, amp)?;
        let cl = self.dims.channel_len();
        let h_hat: Vec<f64> = out[..cl].iter().map(|v| v / self.cfg.channel_scale).collect();
        let mut next = Observation {
            dims: self.dims,
            h_hat,
            phi_r: Vec::new(),
            phi_t: Vec::new(),
            phases,
            amplitude_index: action.amplitude,
        };
        if self.cfg.full_state {
            let co = self.dims.coefficient_len();
            next.phi_r = out[cl..cl + co].to_vec();
            next.phi_t = out[cl + co..cl + 2 * co].to_vec();
        } else {
            let assembled = Observation::assemble(
                self.dims,
                &crate::channel::CMatrix::zeros(self.dims.antennas, self.dims.users),
                (&r, &t),
                next.phases.clone(),
                action.amplitude,
            );
            next.phi_r = assembled.phi_r;
            next.phi_t = assembled.phi_t;
        }
        if !next.is_finite() {
            return Err(Error::Numerical("twin predicted a non-finite state".into()));
        }
        Ok(next)
    }

    pub fn predict_reward(&self, state: &Observation, action: JointAction) -> Result<f64> {
        let x = self.encode_obs(state, action)?;
        let r = self.reward_net.predict(&self.reward_params, &[&x])?[0][0];
        if !r.is_finite() {
            return Err(Error::Numerical("twin predicted a non-finite reward".into()));
        }
        Ok(r)
    }

    /// Pairs `(record i, record i+1)` that belong to the same segment.
    fn samples(&self, dataset: &TwinDataset, reward: &RewardConfig, newest: Option<usize>) -> Result<Vec<Sample>> {
        let states = dataset.surface_states()?;
        let n = dataset.len();
        let first = match newest {
            Some(k) => n.saturating_sub(k + 1),
            None => 0,
        };
        let mut out = Vec::new();
        for i in first..n.saturating_sub(1) {
            let (rec, next) = (&dataset.records[i], &dataset.records[i + 1]);
            if next.fresh {
                continue;
            }
            let (phases, amp_idx) = &states[i];
            let input = self.encode(&rec.h_hat, phases, *amp_idx, rec.action())?;
            let mut target: Vec<f64> = next.h_hat.iter().map(|v| v * self.cfg.channel_scale).collect();
            if self.cfg.full_state {
                let (np, na) = &states[i + 1];
                let (nr, nt) = coefficient_matrices(np, &self.catalog.amplitude_options[*na])?;
                let obs = Observation::assemble(
                    self.dims,
                    &crate::channel::CMatrix::zeros(self.dims.antennas, self.dims.users),
                    (&nr, &nt),
                    np.clone(),
                    *na,
                );
                target.extend(obs.phi_r);
                target.extend(obs.phi_t);
            }
            out.push(Sample {
                input,
                next_state: target,
                reward: reward.reward(rec.sum_rate()),
            });
        }
        Ok(out)
    }

    /// Reward targets the twin is trained on, in dataset order.
    pub fn reward_targets(&self, dataset: &TwinDataset, reward: &RewardConfig) -> Result<Vec<f64>> {
        Ok(self.samples(dataset, reward, None)?.iter().map(|s| s.reward).collect())
    }

    /// One SGD step on the mean loss of `batch` for each enabled net.
    fn sgd_batch(&mut self, batch: &[&Sample], state: bool, reward: bool) -> Result<(f64, f64)> {
        let mut gs = Gradient::zeros_like(&self.state_params);
        let mut gr = Gradient::zeros_like(&self.reward_params);
        let (mut ls, mut lr) = (0.0, 0.0);
        for s in batch {
            if state {
                let (out, cache) = self.state_net.forward(&self.state_params, &[&s.input])?;
                let (l, g) = mse_loss(&out[0], &s.next_state, batch.len())?;
                ls += l;
                self.state_net.backward(&self.state_params, &cache, &[Some(&g)], &mut gs)?;
            }
            if reward {
                let (out, cache) = self.reward_net.forward(&self.reward_params, &[&s.input])?;
                let (l, g) = mse_loss(&out[0], &[s.reward], batch.len())?;
                lr += l;
                self.reward_net.backward(&self.reward_params, &cache, &[Some(&g)], &mut gr)?;
            }
        }
        if state {
            self.state_opt.step(&mut self.state_params, &gs)?;
        }
        if reward {
            self.reward_opt.step(&mut self.reward_params, &gr)?;
        }
        Ok((ls, lr))
    }

    fn holdout(&self, samples: &[&Sample]) -> Result<(f64, f64)> {
        if samples.is_empty() {
            return Ok((f64::NAN, f64::NAN));
        }
        let (mut ls, mut lr) = (0.0, 0.0);
        for s in samples {
            let p = self.state_net.predict(&self.state_params, &[&s.input])?;
            ls += mse_loss(&p[0], &s.next_state, samples.len())?.0;
            let p = self.reward_net.predict(&self.reward_params, &[&s.input])?;
            lr += mse_loss(&p[0], &[s.reward], samples.len())?.0;
        }
        Ok((ls, lr))
    }

    /// Mini-batch training with an 80/20 split and patience-based stopping;
    /// the parameters with the best holdout loss are kept.
    pub fn train_initial<R: Rng + ?Sized>(
        &mut self,
        dataset: &TwinDataset,
        reward: &RewardConfig,
        rng: &mut R,
    ) -> Result<TwinDiagnostics> {
        let samples = self.samples(dataset, reward, None)?;
        if samples.len() < 2 {
            return Err(Error::State(format!(
                "twin needs at least two transitions, dataset holds {}",
                samples.len()
            )));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(rng);
        let n_hold = ((samples.len() as f64 * self.cfg.holdout_fraction).round() as usize).clamp(1, samples.len() - 1);
        let hold: Vec<&Sample> = order[..n_hold].iter().map(|&i| &samples[i]).collect();
        let mut train: Vec<&Sample> = order[n_hold..].iter().map(|&i| &samples[i]).collect();

        let baseline = target_variance(&hold);
        // each predictor keeps its own best parameters and patience counter
        let mut best = self.holdout(&hold)?;
        let mut best_params = (self.state_params.clone(), self.reward_params.clone());
        let mut since = (0, 0);
        let mut epochs = 0;
        let mut last = (f64::NAN, f64::NAN);
        while epochs < self.cfg.max_epochs && (since.0 < self.cfg.patience || since.1 < self.cfg.patience) {
            train.shuffle(rng);
            let (mut ls, mut lr, mut batches) = (0.0, 0.0, 0);
            for chunk in train.chunks(self.cfg.batch_size) {
                let (a, b) = self.sgd_batch(chunk, since.0 < self.cfg.patience, since.1 < self.cfg.patience)?;
                ls += a;
                lr += b;
                batches += 1;
            }
            last = (ls / batches as f64, lr / batches as f64);
            epochs += 1;
            let h = self.holdout(&hold)?;
            if since.0 < self.cfg.patience {
                if h.0 < best.0 {
                    best.0 = h.0;
                    best_params.0 = self.state_params.clone();
                    since.0 = 0;
                } else {
                    since.0 += 1;
                }
            }
            if since.1 < self.cfg.patience {
                if h.1 < best.1 {
                    best.1 = h.1;
                    best_params.1 = self.reward_params.clone();
                    since.1 = 0;
                } else {
                    since.1 += 1;
                }
            }
        }
        self.state_params.copy_from(&best_params.0)?;
        self.reward_params.copy_from(&best_params.1)?;
        self.trained = true;
        Ok(TwinDiagnostics {
            slot: 0,
            epochs,
            state_loss: last.0,
            reward_loss: last.1,
            state_holdout: best.0,
            reward_holdout: best.1,
            state_holdout_baseline: baseline.0,
            reward_holdout_baseline: baseline.1,
        })
    }

    /// One SGD pass over the newest `calib_batch` transitions. Calls with
    /// `slot` off the calibration schedule change nothing.
    pub fn calibrate(&mut self, dataset: &TwinDataset, reward: &RewardConfig, slot: usize) -> Result<Option<TwinDiagnostics>> {
        if slot == 0 || self.cfg.calib_period == 0 || slot % self.cfg.calib_period != 0 {
            eprintln!("warning: calibration requested off schedule at slot {slot}; skipped");
            return Ok(None);
        }
        let samples = self.samples(dataset, reward, Some(self.cfg.calib_batch))?;
        if samples.is_empty() {
            return Ok(None);
        }
        let batch: Vec<&Sample> = samples.iter().collect();
        let (ls, lr) = self.sgd_batch(&batch, true, true)?;
        self.trained = true;
        Ok(Some(TwinDiagnostics {
            slot,
            epochs: 1,
            state_loss: ls,
            reward_loss: lr,
            state_holdout: f64::NAN,
            reward_holdout: f64::NAN,
            state_holdout_baseline: f64::NAN,
            reward_holdout_baseline: f64::NAN,
        }))
    }

    /// Index range of the transitions [`Twin::calibrate`] would use.
    pub fn calibration_window(&self, dataset: &TwinDataset) -> std::ops::Range<usize> {
        let n = dataset.len();
        n.saturating_sub(self.cfg.calib_batch + 1)..n.saturating_sub(1)
    }

    /// Holdout-style losses of both predictors on every pair in `dataset`.
    pub fn evaluate(&self, dataset: &TwinDataset, reward: &RewardConfig) -> Result<(f64, f64)> {
        let samples = self.samples(dataset, reward, None)?;
        let refs: Vec<&Sample> = samples.iter().collect();
        self.holdout(&refs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = TwinCheckpoint {
            format: "iosim-twin".into(),
            state: self.state_params.clone(),
            reward: self.reward_params.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&ck)?)?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let ck: TwinCheckpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ck.format != "iosim-twin" {
            return Err(Error::Config(format!("unsupported twin checkpoint '{}'", ck.format)));
        }
        self.state_params.copy_from(&ck.state)?;
        self.reward_params.copy_from(&ck.reward)?;
        self.trained = true;
        Ok(())
    }
}

/// Steps the twin in place of the live system.
pub struct VirtualEnv<'a> {
    twin: &'a Twin,
    current: Observation,
}

impl<'a> VirtualEnv<'a> {
    pub fn new(twin: &'a Twin, start: Observation) -> Self {
        Self { twin, current: start }
    }
}

impl Environment for VirtualEnv<'_> {
    fn current(&self) -> &Observation {
        &self.current
    }

    fn transition<R: Rng + ?Sized>(&mut self, action: JointAction, _rng: &mut R) -> Result<(Observation, f64)> {
        let next = self.twin.predict_next_state(&self.current, action)?;
        let reward = self.twin.predict_reward(&self.current, action)?;
        self.current = next.clone();
        Ok((next, reward))
    }
}

/// Composed prediction without a stateful wrapper.
pub fn virtual_step(twin: &Twin, state: &Observation, action: JointAction) -> Result<(Observation, f64)> {
    Ok((twin.predict_next_state(state, action)?, twin.predict_reward(state, action)?))
}

pub fn write_training_log(path: &Path, rows: &[TwinDiagnostics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "slot",
            "epochs",
            "state_loss",
            "reward_loss",
            "state_holdout",
            "reward_holdout",
            "state_holdout_baseline",
            "reward_holdout_baseline",
        ])?;
    }
    w.flush()?;
    Ok(())
}

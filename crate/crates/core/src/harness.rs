//! Run orchestration: configuration, the per-slot loops for every scheme,
//! metrics and run-directory outputs, and cross-run reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, DeepQAgent, EpsilonSchedule, Experience, PhysicalAgent};
use crate::baselines::{random_policy, ThompsonBandit};
use crate::env::{EnvConfig, Environment, IosEnv, JointAction};
use crate::error::{Error, Result};
use crate::ios::{presets, AmplitudeSpec, Protocol};
use crate::twin::{Twin, TwinConfig, TwinDataset, TwinRecord, VirtualEnv};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Random,
    Mab,
    Deepios,
    DeepiosNoBranch,
    DeepiosTwin,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Random,
        Mode::Mab,
        Mode::Deepios,
        Mode::DeepiosNoBranch,
        Mode::DeepiosTwin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Random => "random",
            Mode::Mab => "mab",
            Mode::Deepios => "deepios",
            Mode::DeepiosNoBranch => "deepios_no_branch",
            Mode::DeepiosTwin => "deepios_twin",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode '{s}'")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConvergenceConfig {
    pub rel_tol: f64,
    pub hold: usize,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        Self {
            rel_tol: 0.01,
            hold: 1000,
        }
    }
}

/// Everything a run needs. Missing keys take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    /// Physical slots.
    pub horizon: usize,
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub twin: TwinConfig,
    /// Virtual interactions per physical slot in twin mode.
    pub gamma_inner: usize,
    /// Exploration of the physical agent in twin mode.
    pub epsilon_physical: EpsilonSchedule,
    /// Rician factor used while collecting the twin's bootstrap data.
    pub bootstrap_rician_factor: f64,
    /// Short-term average window.
    pub average_window: usize,
    pub convergence: ConvergenceConfig,
    /// Number of final slots averaged for the tail mean.
    pub tail_slots: usize,
    pub record_trajectory: bool,
    /// Dump bandit posteriors at the end of `mab` runs.
    pub log_posteriors: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Deepios,
            seed: 0,
            horizon: 20_000,
            env: EnvConfig::default(),
            agent: AgentConfig::default(),
            twin: TwinConfig::default(),
            gamma_inner: 1000,
            epsilon_physical: EpsilonSchedule::default(),
            bootstrap_rician_factor: 9.0,
            average_window: 2000,
            convergence: ConvergenceConfig::default(),
            tail_slots: 2000,
            record_trajectory: false,
            log_posteriors: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least one slot".into()));
        }
        if self.mode == Mode::DeepiosTwin && self.gamma_inner > 0 && self.twin.dataset_capacity < 2 {
            return Err(Error::Config("twin mode needs a dataset of at least two records".into()));
        }
        if self.average_window == 0 || self.convergence.hold == 0 {
            return Err(Error::Config("average window and convergence hold must be positive".into()));
        }
        if !(self.bootstrap_rician_factor >= 0.0) {
            return Err(Error::Config("bootstrap Rician factor must be non-negative".into()));
        }
        self.env.validate()?;
        self.agent.validate()?;
        self.twin.validate()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Switches the amplitude catalog to the default set of `protocol`.
    pub fn set_protocol(&mut self, protocol: Protocol) {
        if self.env.protocol() == protocol {
            return;
        }
        self.env.amplitudes = match protocol {
            Protocol::Es => AmplitudeSpec::EsRatios(presets::es_ratios_small()),
            Protocol::Ms => AmplitudeSpec::MsGroups(5),
        };
    }
}

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub slot: usize,
    pub sum_rate: f64,
    pub short_term_avg: f64,
    /// `true` once the averaging window is fully populated.
    pub window_full: bool,
    pub reward: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub protocol: Protocol,
    pub rician_factor: f64,
    pub penalty: f64,
    pub increments: usize,
    pub amplitudes: usize,
    pub gamma_inner: usize,
    pub horizon: usize,
    pub tail_mean: f64,
    pub mean_rate: f64,
    pub convergence_slot: Option<usize>,
    pub decision_us_mean: f64,
    pub outages: u64,
    /// Live system steps inside the measured horizon.
    pub env_steps: usize,
    pub virtual_steps: usize,
    pub wall_seconds: f64,
}

/// Sliding mean over the last `window` entries; the prefix uses what exists.
pub fn short_term_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Earliest slot after which the series stays within `rel_tol` of its value
/// at that slot for `hold` consecutive slots.
pub fn detect_convergence(series: &[f64], rel_tol: f64, hold: usize) -> Option<usize> {
    let hold = hold.max(1);
    if series.len() < hold {
        return None;
    }
    let mut i = 0;
    'outer: while i + hold <= series.len() {
        let base = series[i];
        let tol = rel_tol * base.abs();
        for j in i + 1..i + hold {
            if (series[j] - base).abs() > tol {
                i += 1;
                continue 'outer;
            }
        }
        return Some(i);
    }
    None
}

/// Mean of the last `count` entries (all when shorter).
pub fn tail_mean(values: &[f64], count: usize) -> f64 {
    let start = values.len().saturating_sub(count.max(1));
    let tail = &values[start..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().sum::<f64>() / tail.len() as f64
}

struct Trace {
    rates: Vec<f64>,
    rewards: Vec<f64>,
    decision_ns: Vec<u64>,
    actions: Vec<JointAction>,
    virtual_steps: usize,
}

impl Trace {
    fn new(horizon: usize) -> Self {
        Self {
            rates: Vec::with_capacity(horizon),
            rewards: Vec::with_capacity(horizon),
            decision_ns: Vec::with_capacity(horizon),
            actions: Vec::with_capacity(horizon),
            virtual_steps: 0,
        }
    }
}

fn rngs(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let env = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = ChaCha8Rng::seed_from_u64(seed);
    policy.set_stream(1);
    (env, policy)
}

/// Executes one run and writes its outputs into `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.snapshot.json"), serde_json::to_vec_pretty(cfg)?)?;
    let started = Instant::now();
    let (trace, outages) = match cfg.mode {
        Mode::DeepiosTwin => run_algorithm1(cfg, out)?,
        _ => run_baseline(cfg, out)?,
    };
    let wall = started.elapsed().as_secs_f64();
    let summary = write_outputs(cfg, out, &trace, outages, wall)?;
    Ok(summary)
}

/// Drives the live system directly with a random, bandit or online deep-Q
/// policy.
pub fn run_baseline(cfg: &RunConfig, out: &Path) -> Result<(TraceData, u64)> {
    let (mut env_rng, mut rng) = rngs(cfg.seed);
    let mut env = IosEnv::new(cfg.env.clone(), &mut env_rng)?;
    let mut obs = env.reset(&mut env_rng)?;
    let (n1, n2) = env.action_count();
    let mut trace = Trace::new(cfg.horizon);
    match cfg.mode {
        Mode::Random => {
            for _ in 0..cfg.horizon {
                let t0 = Instant::now();
                let a = random_policy(n1, n2, &mut rng);
                trace.decision_ns.push(t0.elapsed().as_nanos() as u64);
                let step = env.step(a, &mut env_rng)?;
                push(&mut trace, a, step.link.sum_rate, step.reward);
            }
        }
        Mode::Mab => {
            let mut bandit = ThompsonBandit::new(n1, n2);
            for _ in 0..cfg.horizon {
                let t0 = Instant::now();
                let a = bandit.select(&mut rng);
                trace.decision_ns.push(t0.elapsed().as_nanos() as u64);
                let step = env.step(a, &mut env_rng)?;
                bandit.update(a, step.reward)?;
                push(&mut trace, a, step.link.sum_rate, step.reward);
            }
            if cfg.log_posteriors {
                write_posteriors(&out.join("posteriors.csv"), &bandit)?;
            }
        }
        Mode::Deepios | Mode::DeepiosNoBranch => {
            let mut agent_cfg = cfg.agent.clone();
            agent_cfg.branching = cfg.mode == Mode::Deepios;
            let mut agent = DeepQAgent::new(agent_cfg, cfg.env.observation_dims(), n1, n2, &mut rng)?;
            let mut diags = Vec::new();
            for _ in 0..cfg.horizon {
                let t0 = Instant::now();
                let a = agent.act(&obs, &mut rng)?;
                trace.decision_ns.push(t0.elapsed().as_nanos() as u64);
                let step = env.step(a, &mut env_rng)?;
                agent.store(Experience {
                    state: obs,
                    action: a,
                    reward: step.reward,
                    next_state: step.observation.clone(),
                });
                match agent.train_step(&mut rng) {
                    Ok(Some(d)) if d.step % 100 == 0 => diags.push(d),
                    Ok(_) => {}
                    Err(e) => {
                        let _ = crate::agent::write_diagnostics(fs::File::create(out.join("training.csv"))?, &diags);
                        return Err(e);
                    }
                }
                push(&mut trace, a, step.link.sum_rate, step.reward);
                obs = step.observation;
            }
            agent.save(&out.join("agent.ckpt"))?;
            crate::agent::write_diagnostics(fs::File::create(out.join("training.csv"))?, &diags)?;
        }
        Mode::DeepiosTwin => {
            return Err(Error::Config("twin mode runs through run_algorithm1".into()));
        }
    }
    Ok((TraceData(trace), env.outages()))
}

/// Opaque per-slot record returned by the run loops.
pub struct TraceData(Trace);

fn push(trace: &mut Trace, a: JointAction, rate: f64, reward: f64) {
    trace.actions.push(a);
    trace.rates.push(rate);
    trace.rewards.push(reward);
}

/// Twin-assisted scheme: per slot, calibrate, train the digital agent
/// against the twin for `gamma_inner` steps, deliver, then act once on the
/// live system and log the slot. `gamma_inner = 0` skips every twin phase and
/// learns online from the live transitions instead.
pub fn run_algorithm1(cfg: &RunConfig, out: &Path) -> Result<(TraceData, u64)> {
    let (mut env_rng, mut rng) = rngs(cfg.seed);
    let mut env = IosEnv::new(cfg.env.clone(), &mut env_rng)?;
    let (n1, n2) = env.action_count();
    let dims = cfg.env.observation_dims();
    let digital_cfg = AgentConfig {
        branching: true,
        ..cfg.agent.clone()
    };
    let mut digital = DeepQAgent::new(digital_cfg, dims, n1, n2, &mut rng)?;
    let mut physical = PhysicalAgent::new(digital.qnet().clone(), digital.online().clone(), cfg.epsilon_physical);

    let mut twin = None;
    let mut dataset = TwinDataset::new(cfg.twin.dataset_capacity);
    let mut twin_log = Vec::new();
    if cfg.gamma_inner > 0 {
        let mut t = Twin::new(cfg.twin.clone(), &env, &mut rng)?;
        // Bootstrap data from a differently conditioned deployment, on its
        // own random stream so the measured horizon sees the same world as
        // the other schemes.
        let mut boot_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        boot_rng.set_stream(2);
        let mut boot_env = IosEnv::with_catalog(cfg.env.clone(), env.catalog().clone())?;
        boot_env.set_rician_factor(cfg.bootstrap_rician_factor)?;
        let mut obs = boot_env.reset(&mut boot_rng)?;
        dataset.begin_segment();
        let mut boot_policy = physical.clone();
        while dataset.len() < cfg.twin.dataset_capacity {
            let a = boot_policy.act(&obs, &mut rng)?;
            let step = boot_env.step(a, &mut boot_rng)?;
            dataset.collect(TwinRecord::from_step(&obs, a, boot_env.catalog(), &step)?);
            obs = step.observation;
        }
        twin_log.push(t.train_initial(&dataset, env.reward_config(), &mut rng)?);
        twin = Some(t);
    }

    let mut obs = env.reset(&mut env_rng)?;
    dataset.begin_segment();
    let mut trace = Trace::new(cfg.horizon);
    for t in 0..cfg.horizon {
        if let Some(tw) = twin.as_mut() {
            if t > 0 && cfg.twin.calib_period > 0 && t % cfg.twin.calib_period == 0 {
                if let Some(d) = tw.calibrate(&dataset, env.reward_config(), t)? {
                    twin_log.push(d);
                }
            }
            if !tw.is_trained() {
                return Err(Error::State("twin untrained at the digital phase".into()));
            }
            let mut venv = VirtualEnv::new(tw, obs.clone());
            for _ in 0..cfg.gamma_inner {
                let s = venv.current().clone();
                let a = digital.act(&s, &mut rng)?;
                let (next, reward) = venv.transition(a, &mut rng)?;
                digital.store(Experience {
                    state: s,
                    action: a,
                    reward,
                    next_state: next,
                });
                digital.train_step(&mut rng)?;
                trace.virtual_steps += 1;
            }
        }
        physical.deliver(digital.online())?;
        if physical.params().values != digital.online().values {
            return Err(Error::State(format!("slot {t}: delivered parameters differ from the digital agent")));
        }
        let t0 = Instant::now();
        let a = physical.act(&obs, &mut rng)?;
        trace.decision_ns.push(t0.elapsed().as_nanos() as u64);
        let step = env.step(a, &mut env_rng)?;
        if twin.is_some() {
            dataset.collect(TwinRecord::from_step(&obs, a, env.catalog(), &step)?);
        } else {
            digital.store(Experience {
                state: obs.clone(),
                action: a,
                reward: step.reward,
                next_state: step.observation.clone(),
            });
            digital.train_step(&mut rng)?;
        }
        push(&mut trace, a, step.link.sum_rate, step.reward);
        obs = step.observation;
    }
    digital.save(&out.join("agent.ckpt"))?;
    if let Some(tw) = &twin {
        tw.save(&out.join("twin.ckpt"))?;
        crate::twin::write_training_log(&out.join("twin_training.csv"), &twin_log)?;
    }
    Ok((TraceData(trace), env.outages()))
}

fn write_posteriors(path: &Path, bandit: &ThompsonBandit) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["increment", "amplitude", "posterior_mean", "posterior_precision", "pull_count"])?;
    for arm in bandit.arms() {
        w.write_record([
            arm.action.increment.to_string(),
            arm.action.amplitude.to_string(),
            arm.posterior_mean.to_string(),
            arm.posterior_precision.to_string(),
            arm.pull_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn write_outputs(cfg: &RunConfig, out: &Path, trace: &TraceData, outages: u64, wall: f64) -> Result<RunSummary> {
    let trace = &trace.0;
    let avg = short_term_average(&trace.rates, cfg.average_window);
    let conv = detect_convergence(&avg, cfg.convergence.rel_tol, cfg.convergence.hold);

    let mut w = csv::Writer::from_path(out.join("metrics.csv"))?;
    for (slot, ((rate, reward), a)) in trace.rates.iter().zip(&trace.rewards).zip(&avg).enumerate() {
        w.serialize(MetricsRow {
            slot,
            sum_rate: *rate,
            short_term_avg: *a,
            window_full: slot + 1 >= cfg.average_window,
            reward: *reward,
            converged: conv.is_some_and(|c| slot >= c),
        })?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("timing.csv"))?;
    w.write_record(["slot", "decision_ns"])?;
    for (slot, ns) in trace.decision_ns.iter().enumerate() {
        w.write_record([slot.to_string(), ns.to_string()])?;
    }
    w.flush()?;

    if cfg.record_trajectory {
        let mut w = csv::Writer::from_path(out.join("trajectory.csv"))?;
        w.write_record(["slot", "increment", "amplitude", "sum_rate", "reward"])?;
        for (slot, ((a, r), rw)) in trace.actions.iter().zip(&trace.rates).zip(&trace.rewards).enumerate() {
            w.write_record([
                slot.to_string(),
                a.increment.to_string(),
                a.amplitude.to_string(),
                r.to_string(),
                rw.to_string(),
            ])?;
        }
        w.flush()?;
    }

    let decision_us_mean = if trace.decision_ns.is_empty() {
        0.0
    } else {
        trace.decision_ns.iter().sum::<u64>() as f64 / trace.decision_ns.len() as f64 / 1e3
    };
    let summary = RunSummary {
        mode: cfg.mode,
        seed: cfg.seed,
        protocol: cfg.env.protocol(),
        rician_factor: cfg.env.rician_factor,
        penalty: cfg.env.reward.penalty,
        increments: cfg.env.increments.len(),
        amplitudes: cfg.env.amplitudes.len(),
        gamma_inner: if cfg.mode == Mode::DeepiosTwin { cfg.gamma_inner } else { 0 },
        horizon: cfg.horizon,
        tail_mean: tail_mean(&trace.rates, cfg.tail_slots),
        mean_rate: tail_mean(&trace.rates, trace.rates.len()),
        convergence_slot: conv,
        decision_us_mean,
        outages,
        env_steps: trace.rates.len(),
        virtual_steps: trace.virtual_steps,
        wall_seconds: wall,
    };
    fs::write(out.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Parameter swept by [`sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda,
    Omega,
    Increments,
    Amplitudes,
    GammaInner,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "lambda" => SweepParam::Lambda,
            "omega" => SweepParam::Omega,
            "increments" => SweepParam::Increments,
            "amplitudes" => SweepParam::Amplitudes,
            "gamma_inner" | "gamma-inner" => SweepParam::GammaInner,
            _ => return Err(Error::Config(format!("unknown sweep parameter '{s}'"))),
        })
    }
}

/// Applies one sweep value; set sizes `small`/`medium`/`large` select the
/// preset action sets.
pub fn apply_sweep_value(cfg: &mut RunConfig, param: SweepParam, value: &str) -> Result<()> {
    let num = || {
        value
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("'{value}' is not a number")))
    };
    match param {
        SweepParam::Lambda => cfg.env.rician_factor = num()?,
        SweepParam::Omega => cfg.env.reward.penalty = num()?,
        SweepParam::GammaInner => cfg.gamma_inner = num()? as usize,
        SweepParam::Increments => {
            cfg.env.increments = match value {
                "small" => presets::increments_small(),
                "medium" => presets::increments_medium(),
                "large" => presets::increments_large(),
                _ => return Err(Error::Config(format!("unknown increment set '{value}'"))),
            }
        }
        SweepParam::Amplitudes => {
            cfg.env.amplitudes = match (cfg.env.protocol(), value) {
                (Protocol::Es, "small") => AmplitudeSpec::EsRatios(presets::es_ratios_small()),
                (Protocol::Es, "medium") => AmplitudeSpec::EsAmplitudes(presets::es_amplitudes_medium()),
                (Protocol::Es, "large") => AmplitudeSpec::EsAmplitudes(presets::es_amplitudes_large()),
                (Protocol::Ms, "small") => AmplitudeSpec::MsGroups(5),
                (Protocol::Ms, "medium") => AmplitudeSpec::MsGroups(10),
                (Protocol::Ms, "large") => AmplitudeSpec::MsGroups(15),
                _ => return Err(Error::Config(format!("unknown amplitude set '{value}'"))),
            }
        }
    }
    Ok(())
}

/// Inner-loop length used by sweeps unless the caller sets one.
pub const SWEEP_GAMMA_INNER: usize = 200;

/// One run directory per (mode, value, seed) under `out`. Cells run on up
/// to `jobs` worker threads; results come back in grid order.
pub fn sweep(
    base: &RunConfig,
    modes: &[Mode],
    param: SweepParam,
    values: &[String],
    seeds: &[u64],
    out: &Path,
    jobs: usize,
) -> Result<Vec<(PathBuf, RunSummary)>> {
    let mut cells = Vec::new();
    for mode in modes {
        for value in values {
            for seed in seeds {
                let mut cfg = base.clone();
                cfg.mode = *mode;
                cfg.seed = *seed;
                apply_sweep_value(&mut cfg, param, value)?;
                cfg.validate()?;
                let dir = out.join(format!("{}_{}-{}_seed{}", mode.name(), param_name(param), value, seed));
                cells.push((cfg, dir));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunSummary>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((cfg, dir)) = cells.get(i) else { break };
                let r = run(cfg, dir);
                if let Ok(mut slots) = results.lock() {
                    slots[i] = Some(r);
                }
            });
        }
    });
    let results = results.into_inner().map_err(|_| Error::State("sweep worker panicked".into()))?;
    cells
        .into_iter()
        .zip(results)
        .map(|((_, dir), r)| match r {
            Some(Ok(s)) => Ok((dir, s)),
            Some(Err(e)) => Err(Error::State(format!("{}: {e}", dir.display()))),
            None => Err(Error::State(format!("{}: run did not finish", dir.display()))),
        })
        .collect()
}

fn param_name(p: SweepParam) -> &'static str {
    match p {
        SweepParam::Lambda => "lambda",
        SweepParam::Omega => "omega",
        SweepParam::Increments => "increments",
        SweepParam::Amplitudes => "amplitudes",
        SweepParam::GammaInner => "gamma_inner",
    }
}

/// Aggregated row of `comparison.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: Mode,
    pub protocol: Protocol,
    pub rician_factor: f64,
    pub penalty: f64,
    pub increments: usize,
    pub amplitudes: usize,
    pub gamma_inner: usize,
    pub runs: usize,
    pub tail_mean: f64,
    pub tail_std: f64,
    pub convergence_slot_mean: Option<f64>,
    pub converged_runs: usize,
    pub decision_us_mean: f64,
}

/// Reads every run directory below `dirs` (recursively one level) and writes
/// `comparison.csv` plus one `.dat` per group into `out`.
pub fn report(dirs: &[PathBuf], out: &Path) -> Result<Vec<ComparisonRow>> {
    let mut runs: Vec<(PathBuf, RunSummary)> = Vec::new();
    for d in dirs {
        collect_runs(d, &mut runs, 2)?;
    }
    if runs.is_empty() {
        return Err(Error::Config("no completed run directories found".into()));
    }
    runs.sort_by(|a, b| a.0.cmp(&b.0));
    fs::create_dir_all(out)?;

    type Key = (Mode, Protocol, u64, u64, usize, usize, usize);
    let key = |s: &RunSummary| -> Key {
        (
            s.mode,
            s.protocol,
            s.rician_factor.to_bits(),
            s.penalty.to_bits(),
            s.increments,
            s.amplitudes,
            s.gamma_inner,
        )
    };
    let mut groups: Vec<(Key, Vec<&(PathBuf, RunSummary)>)> = Vec::new();
    for r in &runs {
        let k = key(&r.1);
        match groups.iter_mut().find(|g| g.0 == k) {
            Some(g) => g.1.push(r),
            None => groups.push((k, vec![r])),
        }
    }

    let mut rows = Vec::new();
    for (_, members) in &groups {
        let s0 = &members[0].1;
        let tails: Vec<f64> = members.iter().map(|m| m.1.tail_mean).collect();
        let n = tails.len() as f64;
        let mean = tails.iter().sum::<f64>() / n;
        let std = if tails.len() > 1 {
            (tails.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let convs: Vec<f64> = members.iter().filter_map(|m| m.1.convergence_slot.map(|c| c as f64)).collect();
        rows.push(ComparisonRow {
            mode: s0.mode,
            protocol: s0.protocol,
            rician_factor: s0.rician_factor,
            penalty: s0.penalty,
            increments: s0.increments,
            amplitudes: s0.amplitudes,
            gamma_inner: s0.gamma_inner,
            runs: members.len(),
            tail_mean: mean,
            tail_std: std,
            convergence_slot_mean: if convs.is_empty() {
                None
            } else {
                Some(convs.iter().sum::<f64>() / convs.len() as f64)
            },
            converged_runs: convs.len(),
            decision_us_mean: members.iter().map(|m| m.1.decision_us_mean).sum::<f64>() / n,
        });
        write_dat(out, s0, members)?;
    }
    let mut w = csv::Writer::from_path(out.join("comparison.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

fn collect_runs(dir: &Path, runs: &mut Vec<(PathBuf, RunSummary)>, depth: usize) -> Result<()> {
    let summary = dir.join("summary.json");
    if summary.is_file() {
        let s: RunSummary = serde_json::from_slice(&fs::read(&summary)?)?;
        runs.push((dir.to_path_buf(), s));
        return Ok(());
    }
    if depth == 0 || !dir.is_dir() {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            collect_runs(&e, runs, depth - 1)?;
        }
    }
    Ok(())
}

/// Seed-averaged short-term average per slot, `slot value` per line.
fn write_dat(out: &Path, s0: &RunSummary, members: &[&(PathBuf, RunSummary)]) -> Result<()> {
    let mut series: Vec<Vec<f64>> = Vec::new();
    for (dir, _) in members {
        let mut r = csv::Reader::from_path(dir.join("metrics.csv"))?;
        let headers = r.headers()?.clone();
        let col = headers
            .iter()
            .position(|h| h == "short_term_avg")
            .ok_or_else(|| Error::Config(format!("{} lacks short_term_avg", dir.display())))?;
        let mut v = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            v.push(
                rec[col]
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad metrics value: {e}")))?,
            );
        }
        series.push(v);
    }
    let len = series.iter().map(|s| s.len()).min().unwrap_or(0);
    let name = format!(
        "{}_{}_lambda{}_omega{}_a{}x{}_g{}.dat",
        s0.mode, s0.protocol, s0.rician_factor, s0.penalty, s0.increments, s0.amplitudes, s0.gamma_inner
    );
    let mut text = String::from("# slot short_term_avg\n");
    for i in 0..len {
        let m = series.iter().map(|s| s[i]).sum::<f64>() / series.len() as f64;
        text.push_str(&format!("{i} {m}\n"));
    }
    fs::write(out.join(name), text)?;
    Ok(())
}

/// Fast consistency checks: `(name, passed, detail)` per check.
pub fn selftest() -> Vec<(String, bool, String)> {
    use crate::channel::{complex_normal, directional_cosines, CMatrix, Geometry};
    use crate::ios::es_amplitude_from_ratio;
    use crate::neural::{Activation, Gradient, InputSpec, LayerSpec, Network, NetworkSpec};
    use crate::transceiver::{mmse_estimate, uplink_pilot, zf_precoder, PilotConfig};

    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let h = CMatrix::from_fn(5, 5, |_, _| complex_normal(&mut rng));
    let est = PilotConfig::scaled_identity(5, 1.0, 0.0)
        .and_then(|p| uplink_pilot(&h, &p, &mut rng).and_then(|y| mmse_estimate(&y, &p)));
    let err = est
        .map(|e| (e - &h).iter().map(|z| z.norm()).fold(0.0, f64::max))
        .unwrap_or(f64::INFINITY);
    out.push(("noiseless estimate".into(), err < 1e-10, format!("max error {err:.2e}")));

    let leak = zf_precoder(&h, 1e8)
        .map(|v| {
            let g = v * &h;
            let mut worst: f64 = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    if i != j {
                        worst = worst.max(g[(i, j)].norm());
                    }
                }
            }
            worst
        })
        .unwrap_or(f64::INFINITY);
    out.push(("zero-forcing leakage".into(), leak < 1e-9, format!("max leakage {leak:.2e}")));

    let expect = [0.995, 0.953, 0.707, 0.302, 0.100];
    let worst = [100.0, 10.0, 1.0, 0.1, 0.01]
        .iter()
        .zip(expect)
        .map(|(r, e)| es_amplitude_from_ratio(*r).map_or(f64::INFINITY, |(b, _)| (b - e).abs()))
        .fold(0.0, f64::max);
    out.push(("energy-split amplitudes".into(), worst < 5e-4, format!("max deviation {worst:.2e}")));

    let cos = directional_cosines(&Geometry::default()).unwrap_or((f64::NAN, f64::NAN));
    let ok = (cos.0 + 0.68041).abs() < 1e-4 && (cos.1 - 0.27217).abs() < 1e-4;
    out.push(("directional cosines".into(), ok, format!("({:.5}, {:.5})", cos.0, cos.1)));

    let net = Network::new(NetworkSpec {
        inputs: vec![InputSpec {
            name: "x".into(),
            steps: 3,
            features: 2,
            layers: vec![LayerSpec::Gru { width: 4 }],
        }],
        trunk: vec![LayerSpec::Residual {
            inner: vec![LayerSpec::Fc {
                width: 4,
                activation: Activation::Linear,
            }],
        }],
        heads: vec![vec![LayerSpec::Fc {
            width: 2,
            activation: Activation::Linear,
        }]],
    });
    let fd = net.map(|net| {
        let p = net.init_params(&mut rng);
        let x = [0.3, -0.7, 1.1, 0.2, -0.4, 0.9];
        let f = |q: &crate::neural::NetworkParams| {
            net.predict(q, &[&x]).map(|o| o[0][0] - 0.5 * o[0][1]).unwrap_or(f64::NAN)
        };
        let mut g = Gradient::zeros_like(&p);
        let worst = net
            .forward(&p, &[&x])
            .and_then(|(_, c)| net.backward(&p, &c, &[Some(&[1.0, -0.5])], &mut g))
            .map(|_| {
                (0..p.len())
                    .map(|i| {
                        let (mut a, mut b) = (p.clone(), p.clone());
                        a.values[i] += 1e-5;
                        b.values[i] -= 1e-5;
                        let num = (f(&a) - f(&b)) / 2e-5;
                        (num - g.0[i]).abs() / (1.0 + num.abs())
                    })
                    .fold(0.0, f64::max)
            })
            .unwrap_or(f64::INFINITY);
        worst
    });
    let fd = fd.unwrap_or(f64::INFINITY);
    out.push(("gradient check".into(), fd < 1e-4, format!("worst relative error {fd:.2e}")));

    let base = std::env::temp_dir().join(format!("iosim-selftest-{}", std::process::id()));
    let cfg = RunConfig {
        mode: Mode::Deepios,
        horizon: 50,
        agent: AgentConfig {
            hidden: 8,
            ..AgentConfig::default()
        },
        ..RunConfig::default()
    };
    let same = (|| -> Result<bool> {
        run(&cfg, &base.join("a"))?;
        run(&cfg, &base.join("b"))?;
        Ok(fs::read(base.join("a/metrics.csv"))? == fs::read(base.join("b/metrics.csv"))?)
    })();
    let _ = fs::remove_dir_all(&base);
    match same {
        Ok(s) => out.push(("seeded determinism".into(), s, "metrics.csv compared byte for byte".into())),
        Err(e) => out.push(("seeded determinism".into(), false, e.to_string())),
    }
    out
}

//! The slot-level decision environment: the surface controller observes the
//! estimated channel plus the coefficients it applied last, picks a phase
//! increment and an amplitude option, and is rewarded with the thresholded
//! sum rate.

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    aggregate_channel, place_ues, step_mobility, ChannelSet, CMatrix, CVector, Geometry,
    MobilityParams, Side, UeState,
};
use crate::error::{invalid, Error, Result};
use crate::ios::{
    build_action_catalog, coefficient_matrices, presets, ActionCatalog, AmplitudeSpec, PhaseState,
    Protocol,
};
use crate::transceiver::{
    evaluate_link, mmse_estimate, uplink_pilot, zf_precoder, LinkResult, PilotConfig,
    DEFAULT_CONDITION_CAP,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Sum-rate threshold in bits/s/Hz.
    pub threshold: f64,
    /// Penalty subtracted below the threshold.
    pub penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            threshold: 10.0,
            penalty: 20.0,
        }
    }
}

impl RewardConfig {
    pub fn reward(&self, sum_rate: f64) -> f64 {
        if sum_rate >= self.threshold {
            sum_rate
        } else {
            sum_rate - self.penalty
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObservationMode {
    /// Coefficient diagonals only, `2 x M`.
    #[default]
    Compact,
    /// Full `2 x M x M` coefficient matrices.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub antennas: usize,
    pub elements: usize,
    pub users: usize,
    /// The first `reflected_users` UEs are served by reflection.
    pub reflected_users: usize,
    pub geometry: Geometry,
    pub mobility: MobilityParams,
    pub slot_seconds: f64,
    pub rician_factor: f64,
    pub pilot_power: f64,
    pub pilot_noise_var: f64,
    pub ue_noise_var: f64,
    pub increments: Vec<i32>,
    pub amplitudes: AmplitudeSpec,
    pub reward: RewardConfig,
    pub observation: ObservationMode,
    /// Redraw UE positions every slot instead of moving them.
    pub redraw_positions_each_slot: bool,
    pub condition_cap: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            antennas: 5,
            elements: 32,
            users: 5,
            reflected_users: 3,
            geometry: Geometry::default(),
            mobility: MobilityParams::default(),
            slot_seconds: 1.0,
            rician_factor: 10.0,
            pilot_power: 1.0,
            pilot_noise_var: 0.1,
            ue_noise_var: 0.5,
            increments: presets::increments_small(),
            amplitudes: AmplitudeSpec::EsRatios(presets::es_ratios_small()),
            reward: RewardConfig::default(),
            observation: ObservationMode::Compact,
            redraw_positions_each_slot: false,
            condition_cap: DEFAULT_CONDITION_CAP,
        }
    }
}

impl EnvConfig {
    pub fn protocol(&self) -> Protocol {
        self.amplitudes.protocol()
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.mobility.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.antennas == 0 || self.elements == 0 || self.users == 0 {
            return bad("antennas, elements and users must be positive");
        }
        if self.antennas < self.users {
            return bad("zero-forcing needs at least as many antennas as users");
        }
        if self.reflected_users > self.users {
            return bad("more reflected users than users");
        }
        if !(self.slot_seconds > 0.0) {
            return bad("slot duration must be positive");
        }
        if !(self.rician_factor >= 0.0) {
            return bad("Rician factor must be non-negative");
        }
        if !(self.ue_noise_var > 0.0) || !(self.pilot_noise_var >= 0.0) || !(self.pilot_power > 0.0) {
            return bad("noise variances and pilot power out of range");
        }
        if !(self.reward.penalty >= 0.0) {
            return bad("reward penalty must be non-negative");
        }
        Ok(())
    }

    pub fn observation_dims(&self) -> ObsDims {
        ObsDims {
            antennas: self.antennas,
            users: self.users,
            elements: self.elements,
            mode: self.observation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsDims {
    pub antennas: usize,
    pub users: usize,
    pub elements: usize,
    pub mode: ObservationMode,
}

impl ObsDims {
    pub fn channel_len(&self) -> usize {
        2 * self.antennas * self.users
    }

    pub fn coefficient_len(&self) -> usize {
        match self.mode {
            ObservationMode::Compact => 2 * self.elements,
            ObservationMode::Full => 2 * self.elements * self.elements,
        }
    }

    /// `(steps, features)` of the channel sequence: one step per UE.
    pub fn channel_sequence(&self) -> (usize, usize) {
        (self.users, 2 * self.antennas)
    }

    /// `(steps, features)` of a coefficient sequence: one step per element.
    pub fn coefficient_sequence(&self) -> (usize, usize) {
        match self.mode {
            ObservationMode::Compact => (self.elements, 2),
            ObservationMode::Full => (self.elements, 2 * self.elements),
        }
    }
}

/// Agent-side view of one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub dims: ObsDims,
    /// Real/imaginary planes of the estimated channel, `[2][N][K]`.
    pub h_hat: Vec<f64>,
    /// Reflection coefficients applied last slot, `[2][M]` or `[2][M][M]`.
    pub phi_r: Vec<f64>,
    pub phi_t: Vec<f64>,
    /// Controller bookkeeping: the running phase vector behind `phi_r`/`phi_t`.
    pub phases: PhaseState,
    pub amplitude_index: usize,
}

impl Observation {
    pub fn assemble(
        dims: ObsDims,
        h_hat: &CMatrix,
        coeffs: (&CVector, &CVector),
        phases: PhaseState,
        amplitude_index: usize,
    ) -> Self {
        Self {
            dims,
            h_hat: channel_planes(h_hat),
            phi_r: coefficient_planes(coeffs.0, dims.mode),
            phi_t: coefficient_planes(coeffs.1, dims.mode),
            phases,
            amplitude_index,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.h_hat
            .iter()
            .chain(&self.phi_r)
            .chain(&self.phi_t)
            .all(|x| x.is_finite())
    }

    /// The channel as `K` steps of `2N` features (real parts then imaginary).
    pub fn channel_sequence(&self) -> Vec<f64> {
        let (n, k) = (self.dims.antennas, self.dims.users);
        let mut out = Vec::with_capacity(2 * n * k);
        for ue in 0..k {
            for plane in 0..2 {
                for ant in 0..n {
                    out.push(self.h_hat[plane * n * k + ant * k + ue]);
                }
            }
        }
        out
    }

    /// A coefficient tensor as `M` steps (one per element).
    pub fn coefficient_sequence(planes: &[f64], dims: &ObsDims) -> Vec<f64> {
        let m = dims.elements;
        match dims.mode {
            ObservationMode::Compact => {
                let mut out = Vec::with_capacity(2 * m);
                for e in 0..m {
                    out.push(planes[e]);
                    out.push(planes[m + e]);
                }
                out
            }
            ObservationMode::Full => {
                let mut out = Vec::with_capacity(2 * m * m);
                for row in 0..m {
                    for plane in 0..2 {
                        out.extend_from_slice(&planes[plane * m * m + row * m..plane * m * m + (row + 1) * m]);
                    }
                }
                out
            }
        }
    }

    /// Diagonal of a coefficient tensor as complex numbers.
    pub fn coefficient_diagonal(planes: &[f64], dims: &ObsDims) -> Vec<Complex64> {
        let m = dims.elements;
        (0..m)
            .map(|e| match dims.mode {
                ObservationMode::Compact => Complex64::new(planes[e], planes[m + e]),
                ObservationMode::Full => Complex64::new(planes[e * m + e], planes[m * m + e * m + e]),
            })
            .collect()
    }
}

fn channel_planes(h: &CMatrix) -> Vec<f64> {
    let (n, k) = h.shape();
    let mut out = vec![0.0; 2 * n * k];
    for a in 0..n {
        for u in 0..k {
            out[a * k + u] = h[(a, u)].re;
            out[n * k + a * k + u] = h[(a, u)].im;
        }
    }
    out
}

fn coefficient_planes(diag: &CVector, mode: ObservationMode) -> Vec<f64> {
    let m = diag.len();
    match mode {
        ObservationMode::Compact => diag.iter().map(|z| z.re).chain(diag.iter().map(|z| z.im)).collect(),
        ObservationMode::Full => {
            let mut out = vec![0.0; 2 * m * m];
            for (e, z) in diag.iter().enumerate() {
                out[e * m + e] = z.re;
                out[m * m + e * m + e] = z.im;
            }
            out
        }
    }
}

/// `(increment index, amplitude index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointAction {
    pub increment: usize,
    pub amplitude: usize,
}

impl JointAction {
    pub fn new(increment: usize, amplitude: usize) -> Self {
        Self { increment, amplitude }
    }

    /// Flattened index over `increments x amplitudes`, amplitude fastest.
    pub fn flat(&self, amplitudes: usize) -> usize {
        self.increment * amplitudes + self.amplitude
    }

    pub fn from_flat(index: usize, amplitudes: usize) -> Self {
        Self::new(index / amplitudes, index % amplitudes)
    }
}

/// Anything the agent can step against: the live system or its learned twin.
pub trait Environment {
    fn current(&self) -> &Observation;
    fn transition<R: Rng + ?Sized>(&mut self, action: JointAction, rng: &mut R) -> Result<(Observation, f64)>;
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: f64,
    pub link: LinkResult,
}

/// The IOS-assisted MU-MIMO downlink.
#[derive(Debug, Clone)]
pub struct IosEnv {
    cfg: EnvConfig,
    catalog: ActionCatalog,
    pilot: PilotConfig,
    sides: Vec<Side>,
    noise: Vec<f64>,
    ues: Vec<UeState>,
    phases: PhaseState,
    amplitude_index: usize,
    last: Option<Observation>,
    slot: u64,
    outages: u64,
}

impl IosEnv {
    /// Builds the action catalog (MS groups draw from `rng`).
    pub fn new<R: Rng + ?Sized>(cfg: EnvConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let catalog = build_action_catalog(cfg.elements, &cfg.increments, &cfg.amplitudes, rng)?;
        Self::with_catalog(cfg, catalog)
    }

    pub fn with_catalog(cfg: EnvConfig, catalog: ActionCatalog) -> Result<Self> {
        cfg.validate()?;
        if catalog.phase_increments.iter().any(|v| v.len() != cfg.elements)
            || catalog.amplitude_options.iter().any(|a| a.len() != cfg.elements)
        {
            return Err(Error::Config("catalog does not match the element count".into()));
        }
        let pilot = PilotConfig::scaled_identity(cfg.users, cfg.pilot_power, cfg.pilot_noise_var)?;
        let sides = (0..cfg.users)
            .map(|i| if i < cfg.reflected_users { Side::Reflected } else { Side::Refracted })
            .collect();
        Ok(Self {
            noise: vec![cfg.ue_noise_var; cfg.users],
            phases: PhaseState::identity(cfg.elements),
            amplitude_index: 0,
            ues: Vec::new(),
            last: None,
            slot: 0,
            outages: 0,
            catalog,
            pilot,
            sides,
            cfg,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn catalog(&self) -> &ActionCatalog {
        &self.catalog
    }

    /// `(|A1|, |A2|)`.
    pub fn action_count(&self) -> (usize, usize) {
        (self.catalog.increments(), self.catalog.amplitudes())
    }

    pub fn ues(&self) -> &[UeState] {
        &self.ues
    }

    pub fn phases(&self) -> &PhaseState {
        &self.phases
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    /// Slots where the estimated channel could not be zero-forced.
    pub fn outages(&self) -> u64 {
        self.outages
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.cfg.reward
    }

    /// Sets the Rician factor used for subsequent slots.
    pub fn set_rician_factor(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0) {
            return Err(invalid("Rician factor must be non-negative"));
        }
        self.cfg.rician_factor = lambda;
        Ok(())
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Observation> {
        self.phases = PhaseState::identity(self.cfg.elements);
        self.amplitude_index = 0;
        self.slot = 0;
        self.outages = 0;
        self.ues = place_ues(
            self.cfg.users,
            self.cfg.reflected_users,
            &self.cfg.mobility,
            &self.cfg.geometry,
            rng,
        );
        let (obs, _) = self.measure(rng)?;
        self.last = Some(obs.clone());
        Ok(obs)
    }

    /// One slot: configure the surface, let the world evolve, run the pilot
    /// round and the downlink.
    pub fn step<R: Rng + ?Sized>(&mut self, action: JointAction, rng: &mut R) -> Result<StepOutcome> {
        if self.last.is_none() {
            return Err(Error::State("environment stepped before reset".into()));
        }
        let (n1, n2) = self.action_count();
        if action.increment >= n1 || action.amplitude >= n2 {
            return Err(invalid(format!("action {action:?} outside {n1}x{n2}")));
        }
        self.phases = self
            .phases
            .apply_increment(&self.catalog.phase_increments[action.increment])?;
        self.amplitude_index = action.amplitude;

        if self.cfg.redraw_positions_each_slot {
            self.ues = place_ues(
                self.cfg.users,
                self.cfg.reflected_users,
                &self.cfg.mobility,
                &self.cfg.geometry,
                rng,
            );
        } else {
            let (geom, mob, dt) = (self.cfg.geometry, self.cfg.mobility, self.cfg.slot_seconds);
            for ue in self.ues.iter_mut() {
                *ue = step_mobility(ue, &mob, dt, &geom, rng);
            }
        }
        let (observation, link) = self.measure(rng)?;
        let reward = self.cfg.reward.reward(link.sum_rate);
        self.slot += 1;
        self.last = Some(observation.clone());
        Ok(StepOutcome {
            observation,
            reward,
            link,
        })
    }

    fn measure<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(Observation, LinkResult)> {
        let channels = ChannelSet::draw(
            &self.cfg.geometry,
            &self.ues,
            self.cfg.antennas,
            self.cfg.elements,
            self.cfg.rician_factor,
            rng,
        )?;
        let amp = &self.catalog.amplitude_options[self.amplitude_index];
        let (phi_r, phi_t) = coefficient_matrices(&self.phases, amp)?;
        let h = aggregate_channel(&channels, &phi_r, &phi_t, &self.sides)?;
        let y = uplink_pilot(&h, &self.pilot, rng)?;
        let h_hat = mmse_estimate(&y, &self.pilot)?;
        let link = match zf_precoder(&h_hat, self.cfg.condition_cap) {
            Ok(v) => evaluate_link(&v, &h, &self.noise)?,
            Err(Error::PrecoderSingular(c)) => {
                self.outages += 1;
                eprintln!("warning: slot {} precoder singular (cond {c:.2e}), scored as outage", self.slot);
                LinkResult::outage(self.cfg.users)
            }
            Err(e) => return Err(e),
        };
        let obs = Observation::assemble(
            self.cfg.observation_dims(),
            &h_hat,
            (&phi_r, &phi_t),
            self.phases.clone(),
            self.amplitude_index,
        );
        Ok((obs, link))
    }
}

impl Environment for IosEnv {
    fn current(&self) -> &Observation {
        self.last.as_ref().expect("environment not reset")
    }

    fn transition<R: Rng + ?Sized>(&mut self, action: JointAction, rng: &mut R) -> Result<(Observation, f64)> {
        let out = self.step(action, rng)?;
        Ok((out.observation, out.reward))
    }
}

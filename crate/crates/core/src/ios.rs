//! Surface configurations: running phase state, amplitude profiles under the
//! energy-splitting (ES) and mode-switching (MS) protocols, and the discrete
//! action catalog.

use std::collections::HashSet;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{steering_vector, CVector};
use crate::error::{invalid, Error, Result};

const CONSTRAINT_TOL: f64 = 1e-9;
const UNIT_MODULUS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Es,
    Ms,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "es" => Ok(Protocol::Es),
            "ms" => Ok(Protocol::Ms),
            other => Err(invalid(format!("unknown protocol '{other}'"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Es => "es",
            Protocol::Ms => "ms",
        })
    }
}

/// Unit-modulus phase vector, the running product of applied increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState(Vec<Complex64>);

impl PhaseState {
    /// All phases at 1.
    pub fn identity(elements: usize) -> Self {
        Self(vec![Complex64::new(1.0, 0.0); elements])
    }

    pub fn from_phases(phases: Vec<Complex64>) -> Result<Self> {
        check_unit_modulus(&phases)?;
        Ok(Self(phases))
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Element-wise product with `delta`.
    pub fn apply_increment(&self, delta: &[Complex64]) -> Result<Self> {
        if delta.len() != self.0.len() {
            return Err(invalid(format!(
                "increment has {} entries, state has {}",
                delta.len(),
                self.0.len()
            )));
        }
        check_unit_modulus(delta)?;
        Ok(Self(self.0.iter().zip(delta).map(|(p, d)| p * d).collect()))
    }

    /// Whether every phase lies within `tol` radians of the `levels`-point
    /// uniform grid on `[0, 2 pi)`.
    pub fn on_phase_grid(&self, levels: usize, tol: f64) -> bool {
        if levels == 0 {
            return false;
        }
        let step = 2.0 * PI / levels as f64;
        self.0.iter().all(|p| {
            let a = p.arg().rem_euclid(2.0 * PI);
            let r = (a / step).round() * step;
            (a - r).abs() <= tol
        })
    }
}

fn check_unit_modulus(v: &[Complex64]) -> Result<()> {
    match v.iter().position(|z| (z.norm() - 1.0).abs() > UNIT_MODULUS_TOL) {
        Some(i) => Err(invalid(format!("entry {i} is not unit-modulus: |{}| = {}", v[i], v[i].norm()))),
        None => Ok(()),
    }
}

/// Per-element reflection and refraction amplitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeProfile {
    protocol: Protocol,
    beta_r: Vec<f64>,
    beta_t: Vec<f64>,
}

impl AmplitudeProfile {
    /// Validates the protocol constraint element-wise.
    pub fn new(protocol: Protocol, beta_r: Vec<f64>, beta_t: Vec<f64>) -> Result<Self> {
        if beta_r.len() != beta_t.len() {
            return Err(invalid("reflect and refract amplitude vectors differ in length"));
        }
        for (m, (&r, &t)) in beta_r.iter().zip(&beta_t).enumerate() {
            if !(0.0..=1.0).contains(&r) || !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("element {m}: amplitudes ({r}, {t}) outside [0, 1]")));
            }
            let ok = match protocol {
                Protocol::Es => (r * r + t * t - 1.0).abs() <= CONSTRAINT_TOL,
                Protocol::Ms => (r == 1.0 && t == 0.0) || (r == 0.0 && t == 1.0),
            };
            if !ok {
                return Err(invalid(format!(
                    "element {m}: ({r}, {t}) violates the {protocol} constraint"
                )));
            }
        }
        Ok(Self {
            protocol,
            beta_r,
            beta_t,
        })
    }

    /// Equal-mode ES profile: every element shares `beta_r`.
    pub fn es_equal(elements: usize, beta_r: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta_r) {
            return Err(invalid(format!("reflect amplitude {beta_r} outside [0, 1]")));
        }
        let beta_t = (1.0 - beta_r * beta_r).max(0.0).sqrt();
        Self::new(Protocol::Es, vec![beta_r; elements], vec![beta_t; elements])
    }

    pub fn protocol(&self) -> Protocol {
        self.protocol
    }

    pub fn beta_r(&self) -> &[f64] {
        &self.beta_r
    }

    pub fn beta_t(&self) -> &[f64] {
        &self.beta_t
    }

    pub fn len(&self) -> usize {
        self.beta_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_r.is_empty()
    }
}

/// `(beta_r, beta_t)` from the power ratio `beta_r^2 / beta_t^2`.
pub fn es_amplitude_from_ratio(ratio: f64) -> Result<(f64, f64)> {
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(invalid(format!("amplitude ratio must be positive, got {ratio}")));
    }
    Ok(((ratio / (1.0 + ratio)).sqrt(), (1.0 / (1.0 + ratio)).sqrt()))
}

/// `groups` random reflect/refract element partitions, each distinct.
pub fn build_ms_groups<R: Rng + ?Sized>(
    elements: usize,
    groups: usize,
    rng: &mut R,
) -> Result<Vec<AmplitudeProfile>> {
    if groups == 0 {
        return Err(invalid("at least one MS group is required"));
    }
    if elements < 64 && groups as u64 > 1u64 << elements {
        return Err(invalid(format!("{groups} distinct groups impossible with {elements} elements")));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(groups);
    while out.len() < groups {
        let bits: Vec<bool> = (0..elements).map(|_| rng.random::<bool>()).collect();
        if !seen.insert(bits.clone()) {
            continue;
        }
        let beta_r: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let beta_t = beta_r.iter().map(|r| 1.0 - r).collect();
        out.push(AmplitudeProfile::new(Protocol::Ms, beta_r, beta_t)?);
    }
    Ok(out)
}

/// Diagonals of `Phi_r` and `Phi_t`.
pub fn coefficient_matrices(state: &PhaseState, amp: &AmplitudeProfile) -> Result<(CVector, CVector)> {
    if state.len() != amp.len() {
        return Err(invalid("phase state and amplitude profile differ in length"));
    }
    let p = state.as_slice();
    let r = CVector::from_iterator(p.len(), p.iter().zip(&amp.beta_r).map(|(z, b)| z * *b));
    let t = CVector::from_iterator(p.len(), p.iter().zip(&amp.beta_t).map(|(z, b)| z * *b));
    Ok((r, t))
}

/// How the amplitude sub-action set is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeSpec {
    /// ES equal mode from power ratios `beta_r^2 / beta_t^2`.
    EsRatios(Vec<f64>),
    /// ES equal mode from reflection amplitudes directly.
    EsAmplitudes(Vec<f64>),
    /// `n` random MS element groups.
    MsGroups(usize),
}

impl AmplitudeSpec {
    pub fn protocol(&self) -> Protocol {
        match self {
            AmplitudeSpec::MsGroups(_) => Protocol::Ms,
            _ => Protocol::Es,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            AmplitudeSpec::EsRatios(v) | AmplitudeSpec::EsAmplitudes(v) => v.len(),
            AmplitudeSpec::MsGroups(n) => *n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sub-action set definitions used in the evaluation.
pub mod presets {
    /// `{-3, -1, 0, 1, 3} / M`.
    pub fn increments_small() -> Vec<i32> {
        vec![-3, -1, 0, 1, 3]
    }

    /// `{-9, ..., 9} / M`.
    pub fn increments_medium() -> Vec<i32> {
        (-9..=9).collect()
    }

    /// `{-15, ..., 15} / M`.
    pub fn increments_large() -> Vec<i32> {
        (-15..=15).collect()
    }

    pub fn es_ratios_small() -> Vec<f64> {
        vec![100.0, 10.0, 1.0, 0.1, 0.01]
    }

    pub fn es_amplitudes_medium() -> Vec<f64> {
        vec![0.998, 0.995, 0.990, 0.953, 0.913, 0.707, 0.577, 0.302, 0.218, 0.100]
    }

    pub fn es_amplitudes_large() -> Vec<f64> {
        vec![
            1.000, 0.999, 0.998, 0.995, 0.990, 0.953, 0.913, 0.806, 0.707, 0.577, 0.302, 0.218,
            0.100, 0.070, 0.032,
        ]
    }
}

/// Discrete phase-increment and amplitude options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionCatalog {
    /// Increment `l` selects `w(l / M)`.
    pub increment_indices: Vec<i32>,
    pub phase_increments: Vec<Vec<Complex64>>,
    pub amplitude_options: Vec<AmplitudeProfile>,
}

impl ActionCatalog {
    pub fn increments(&self) -> usize {
        self.phase_increments.len()
    }

    pub fn amplitudes(&self) -> usize {
        self.amplitude_options.len()
    }

    /// Position of the identity increment `w(0)`.
    pub fn identity_increment(&self) -> usize {
        self.increment_indices
            .iter()
            .position(|&l| l == 0)
            .expect("catalog always holds w(0)")
    }
}

pub fn build_action_catalog<R: Rng + ?Sized>(
    elements: usize,
    increment_indices: &[i32],
    amplitudes: &AmplitudeSpec,
    rng: &mut R,
) -> Result<ActionCatalog> {
    if elements == 0 {
        return Err(invalid("surface needs at least one element"));
    }
    if amplitudes.is_empty() {
        return Err(invalid("amplitude set must not be empty"));
    }
    let mut seen = HashSet::new();
    if let Some(d) = increment_indices.iter().find(|l| !seen.insert(**l)) {
        return Err(invalid(format!("duplicate phase increment {d}/M")));
    }
    if !increment_indices.contains(&0) {
        return Err(invalid("increment set must contain w(0)"));
    }
    let phase_increments = increment_indices
        .iter()
        .map(|&l| steering_vector(l as f64 / elements as f64, elements).map(|v| v.iter().copied().collect()))
        .collect::<Result<Vec<Vec<Complex64>>>>()?;

    let amplitude_options = match amplitudes {
        AmplitudeSpec::EsRatios(ratios) => ratios
            .iter()
            .map(|&q| {
                let (r, t) = es_amplitude_from_ratio(q)?;
                AmplitudeProfile::new(Protocol::Es, vec![r; elements], vec![t; elements])
            })
            .collect::<Result<Vec<_>>>()?,
        AmplitudeSpec::EsAmplitudes(betas) => betas
            .iter()
            .map(|&b| AmplitudeProfile::es_equal(elements, b))
            .collect::<Result<Vec<_>>>()?,
        AmplitudeSpec::MsGroups(n) => build_ms_groups(elements, *n, rng)?,
    };
    Ok(ActionCatalog {
        increment_indices: increment_indices.to_vec(),
        phase_increments,
        amplitude_options,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn w(l: i32, m: usize) -> Vec<Complex64> {
        steering_vector(l as f64 / m as f64, m).unwrap().iter().copied().collect()
    }

    #[test]
    fn ratio_examples() {
        let (r, t) = es_amplitude_from_ratio(1.0).unwrap();
        assert!((r - 0.70711).abs() < 1e-5 && (t - 0.70711).abs() < 1e-5);
        let (r, t) = es_amplitude_from_ratio(100.0).unwrap();
        assert!((r - 0.99504).abs() < 1e-5 && (t - 0.09950).abs() < 1e-5);
        let (r, _) = es_amplitude_from_ratio(0.01).unwrap();
        assert!((r - 0.09950).abs() < 1e-5);
        assert!(es_amplitude_from_ratio(0.0).is_err());
        assert!(es_amplitude_from_ratio(-2.0).is_err());
    }

    #[test]
    fn ms_groups_satisfy_constraint_and_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let groups = build_ms_groups(32, 5, &mut rng).unwrap();
        assert_eq!(groups.len(), 5);
        for g in &groups {
            for (r, t) in g.beta_r().iter().zip(g.beta_t()) {
                assert_eq!(r + t, 1.0);
                assert!(*r == 0.0 || *r == 1.0);
            }
        }
        let distinct: HashSet<Vec<u64>> = groups
            .iter()
            .map(|g| g.beta_r().iter().map(|b| b.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert_eq!(groups, build_ms_groups(32, 5, &mut rng).unwrap());
        // forces collisions: 4 possible vectors with 2 elements
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert_eq!(build_ms_groups(2, 4, &mut rng).unwrap().len(), 4);
        assert!(build_ms_groups(2, 5, &mut rng).is_err());
    }

    #[test]
    fn profile_constraints_enforced() {
        assert!(AmplitudeProfile::new(Protocol::Es, vec![0.6], vec![0.8]).is_ok());
        assert!(AmplitudeProfile::new(Protocol::Es, vec![0.6], vec![0.7]).is_err());
        assert!(AmplitudeProfile::new(Protocol::Ms, vec![0.5], vec![0.5]).is_err());
        assert!(AmplitudeProfile::new(Protocol::Ms, vec![1.0, 0.0], vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn increments_compose() {
        let m = 32;
        let s = PhaseState::identity(m);
        assert_eq!(s.apply_increment(&w(0, m)).unwrap(), s);
        let back = s.apply_increment(&w(1, m)).unwrap().apply_increment(&w(-1, m)).unwrap();
        for (a, b) in back.as_slice().iter().zip(s.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
        let mut thrice = s.clone();
        for _ in 0..3 {
            thrice = thrice.apply_increment(&w(1, m)).unwrap();
        }
        let once = s.apply_increment(&w(3, m)).unwrap();
        for (a, b) in thrice.as_slice().iter().zip(once.as_slice()) {
            assert!((a - b).norm() < 1e-12);
        }
        let bad = vec![Complex64::new(1.1, 0.0); m];
        assert!(s.apply_increment(&bad).is_err());
    }

    #[test]
    fn reachable_phases_lie_on_pi_over_m_grid() {
        let m = 32;
        let mut s = PhaseState::identity(m);
        for l in [3, -1, 3, 3, 1] {
            s = s.apply_increment(&w(l, m)).unwrap();
        }
        assert!(s.on_phase_grid(2 * m, 1e-9));
        let off = PhaseState::from_phases(vec![Complex64::from_polar(1.0, 0.01)]).unwrap();
        assert!(!off.on_phase_grid(64, 1e-3));
    }

    #[test]
    fn coefficients_follow_amplitudes() {
        let amp = AmplitudeProfile::es_equal(4, es_amplitude_from_ratio(1.0).unwrap().0).unwrap();
        let (r, t) = coefficient_matrices(&PhaseState::identity(4), &amp).unwrap();
        for z in r.iter().chain(t.iter()) {
            assert!((z.re - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12 && z.im == 0.0);
        }
        let ms = AmplitudeProfile::new(Protocol::Ms, vec![1.0, 0.0], vec![0.0, 1.0]).unwrap();
        let state = PhaseState::from_phases(vec![Complex64::from_polar(1.0, 0.4); 2]).unwrap();
        let (r, t) = coefficient_matrices(&state, &ms).unwrap();
        assert_eq!(t[0], Complex64::new(0.0, 0.0));
        assert_eq!(r[1], Complex64::new(0.0, 0.0));
        let energy: f64 = r.iter().chain(t.iter()).map(|z| z.norm_sqr()).sum();
        assert!((energy - 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_es_catalog() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cat = build_action_catalog(
            32,
            &presets::increments_small(),
            &AmplitudeSpec::EsRatios(presets::es_ratios_small()),
            &mut rng,
        )
        .unwrap();
        assert_eq!((cat.increments(), cat.amplitudes()), (5, 5));
        let expect = [0.995, 0.953, 0.707, 0.302, 0.100];
        for (opt, e) in cat.amplitude_options.iter().zip(expect) {
            assert!((opt.beta_r()[0] - e).abs() < 5e-4);
        }
        assert!(cat.phase_increments[cat.identity_increment()]
            .iter()
            .all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn catalog_rejects_bad_increment_lists() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let amps = AmplitudeSpec::EsRatios(vec![1.0]);
        assert!(build_action_catalog(32, &[0, 1, 1], &amps, &mut rng).is_err());
        assert!(build_action_catalog(32, &[1, -1], &amps, &mut rng).is_err());
        let large = build_action_catalog(32, &presets::increments_large(), &amps, &mut rng).unwrap();
        assert_eq!(large.increments(), 31);
    }
}

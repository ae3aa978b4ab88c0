//! One slot of the physical link: uplink pilots with MMSE estimation, then
//! zero-forcing downlink with per-UE SINR and rate.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{complex_normal, CMatrix};
use crate::error::{invalid, Error, Result};

/// Largest admissible condition number of the estimated channel.
pub const DEFAULT_CONDITION_CAP: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct PilotConfig {
    /// `K x K` pilot matrix.
    pub pilot: CMatrix,
    /// Noise variance at the BS (linear).
    pub noise_var: f64,
}

impl PilotConfig {
    /// Orthogonal pilots `sqrt(power) I`.
    pub fn scaled_identity(users: usize, power: f64, noise_var: f64) -> Result<Self> {
        if !(power > 0.0) {
            return Err(invalid("pilot power must be positive"));
        }
        Self::new(CMatrix::identity(users, users) * Complex64::new(power.sqrt(), 0.0), noise_var)
    }

    pub fn new(pilot: CMatrix, noise_var: f64) -> Result<Self> {
        if !pilot.is_square() {
            return Err(invalid("pilot matrix must be square"));
        }
        if !(noise_var >= 0.0) {
            return Err(invalid("pilot noise variance must be non-negative"));
        }
        let sv = pilot.singular_values();
        if sv.min() <= 1e-12 * sv.max().max(f64::MIN_POSITIVE) {
            return Err(invalid("pilot matrix must have full rank"));
        }
        Ok(Self { pilot, noise_var })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkResult {
    pub sinr: Vec<f64>,
    /// bits/s/Hz per UE.
    pub rate: Vec<f64>,
    pub sum_rate: f64,
}

impl LinkResult {
    pub fn from_sinr(sinr: Vec<f64>) -> Self {
        let rate: Vec<f64> = sinr.iter().map(|s| (1.0 + s).log2()).collect();
        let sum_rate = rate.iter().sum();
        Self { sinr, rate, sum_rate }
    }

    /// A slot where no precoder could be formed.
    pub fn outage(users: usize) -> Self {
        Self::from_sinr(vec![0.0; users])
    }
}

/// `Y_p = H X_p + N`.
pub fn uplink_pilot<R: Rng + ?Sized>(h: &CMatrix, cfg: &PilotConfig, rng: &mut R) -> Result<CMatrix> {
    if h.ncols() != cfg.pilot.nrows() {
        return Err(invalid(format!(
            "channel has {} users, pilot matrix is {}x{}",
            h.ncols(),
            cfg.pilot.nrows(),
            cfg.pilot.ncols()
        )));
    }
    let mut y = h * &cfg.pilot;
    if cfg.noise_var > 0.0 {
        let sd = cfg.noise_var.sqrt();
        for z in y.iter_mut() {
            *z += complex_normal(rng) * sd;
        }
    }
    Ok(y)
}

/// `H~ = Y_p X_p^H (X_p X_p^H + sigma_p^2 I)^-1`.
pub fn mmse_estimate(y: &CMatrix, cfg: &PilotConfig) -> Result<CMatrix> {
    let x = &cfg.pilot;
    if y.ncols() != x.nrows() {
        return Err(invalid("pilot observation and pilot matrix disagree"));
    }
    let k = x.nrows();
    let gram = x * x.adjoint() + CMatrix::identity(k, k) * Complex64::new(cfg.noise_var, 0.0);
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Singular("regularized pilot Gram matrix".into()))?;
    Ok(y * x.adjoint() * inv)
}

/// Row-normalized zero-forcing precoder, `K x N`. Row `k` is `v_k^H`.
pub fn zf_precoder(h_hat: &CMatrix, condition_cap: f64) -> Result<CMatrix> {
    let (n, k) = h_hat.shape();
    if n < k {
        return Err(invalid(format!("{n} antennas cannot separate {k} users")));
    }
    let sv = h_hat.singular_values();
    let cond = sv.max() / sv.min();
    if !cond.is_finite() || cond > condition_cap {
        return Err(Error::PrecoderSingular(cond));
    }
    let hh = h_hat.adjoint();
    let gram_inv = (&hh * h_hat)
        .try_inverse()
        .ok_or(Error::PrecoderSingular(cond))?;
    let mut v = gram_inv * hh;
    for mut row in v.row_iter_mut() {
        let norm = row.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::PrecoderSingular(cond));
        }
        row /= Complex64::new(norm, 0.0);
    }
    Ok(v)
}

/// Per-UE SINR and rate of precoder `v` on the true channel `h`.
pub fn evaluate_link(v: &CMatrix, h: &CMatrix, noise_var: &[f64]) -> Result<LinkResult> {
    let k = h.ncols();
    if v.nrows() != k || v.ncols() != h.nrows() || noise_var.len() != k {
        return Err(invalid("precoder, channel and noise dimensions disagree"));
    }
    if noise_var.iter().any(|s| !(*s > 0.0)) {
        return Err(invalid("UE noise variance must be positive"));
    }
    // gains[(l, k)] = v_l^H h_k
    let gains: DMatrix<Complex64> = v * h;
    let sinr = (0..k)
        .map(|ue| {
            let signal = gains[(ue, ue)].norm_sqr();
            let interference: f64 = (0..k)
                .filter(|l| *l != ue)
                .map(|l| gains[(l, ue)].norm_sqr())
                .sum();
            signal / (interference + noise_var[ue])
        })
        .collect();
    Ok(LinkResult::from_sinr(sinr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> CMatrix {
        CMatrix::from_fn(r, c, |_, _| complex_normal(rng))
    }

    #[test]
    fn noiseless_pilot_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = random_matrix(&mut rng, 5, 5);
        let cfg = PilotConfig::scaled_identity(5, 1.0, 0.0).unwrap();
        let y = uplink_pilot(&h, &cfg, &mut rng).unwrap();
        assert_eq!(y, &h * &cfg.pilot);
        let est = mmse_estimate(&y, &cfg).unwrap();
        assert!((est - &h).iter().all(|z| z.norm() < 1e-10));
    }

    #[test]
    fn pilot_noise_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = CMatrix::zeros(1, 1);
        let cfg = PilotConfig::scaled_identity(1, 1.0, 0.1).unwrap();
        let draws = 100_000;
        let var: f64 = (0..draws)
            .map(|_| uplink_pilot(&h, &cfg, &mut rng).unwrap()[(0, 0)].norm_sqr())
            .sum::<f64>()
            / draws as f64;
        assert!((var - 0.1).abs() < 0.003);
    }

    #[test]
    fn scaled_identity_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Complex64::new(0.6, -0.9);
        let cfg = PilotConfig::new(CMatrix::identity(3, 3) * c, 0.4).unwrap();
        let y = random_matrix(&mut rng, 4, 3);
        let est = mmse_estimate(&y, &cfg).unwrap();
        let expect = &y * (c.conj() / (c.norm_sqr() + 0.4));
        assert!((est - expect).iter().all(|z| z.norm() < 1e-12));
        let loud = PilotConfig::new(CMatrix::identity(3, 3) * c, 1e12).unwrap();
        assert!(mmse_estimate(&y, &loud).unwrap().norm() < 1e-9);
    }

    #[test]
    fn rank_deficient_pilot_rejected() {
        assert!(PilotConfig::new(CMatrix::zeros(2, 2), 0.1).is_err());
    }

    #[test]
    fn zf_nulls_interference_and_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_matrix(&mut rng, 5, 4);
        let v = zf_precoder(&h, DEFAULT_CONDITION_CAP).unwrap();
        for row in v.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-12);
        }
        let g = &v * &h;
        for l in 0..4 {
            for k in 0..4 {
                if l != k {
                    assert!(g[(l, k)].norm() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn zf_on_orthogonal_columns_is_matched_filter() {
        let mut h = CMatrix::zeros(3, 2);
        h[(0, 0)] = Complex64::new(2.0, 1.0);
        h[(1, 0)] = Complex64::new(0.0, -1.0);
        h[(2, 1)] = Complex64::new(-3.0, 0.5);
        let v = zf_precoder(&h, DEFAULT_CONDITION_CAP).unwrap();
        for k in 0..2 {
            let col = h.column(k);
            let expect = col.adjoint() / Complex64::new(col.norm(), 0.0);
            assert!((v.row(k) - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn zf_rejects_rank_deficient() {
        let col = CMatrix::from_element(4, 1, Complex64::new(1.0, 0.0));
        let h = CMatrix::from_columns(&[col.column(0), col.column(0)]);
        assert!(matches!(zf_precoder(&h, DEFAULT_CONDITION_CAP), Err(Error::PrecoderSingular(_))));
        assert!(zf_precoder(&CMatrix::zeros(2, 3), DEFAULT_CONDITION_CAP).is_err());
    }

    #[test]
    fn single_user_sinr() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_matrix(&mut rng, 4, 1);
        let v = zf_precoder(&h, DEFAULT_CONDITION_CAP).unwrap();
        let res = evaluate_link(&v, &h, &[0.5]).unwrap();
        let expect = h.norm_squared() / 0.5;
        assert!((res.sinr[0] - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn unit_sinr_gives_one_bit() {
        let h = CMatrix::from_element(1, 1, Complex64::new(0.0, 0.5f64.sqrt()));
        let v = CMatrix::from_element(1, 1, Complex64::new(1.0, 0.0));
        let res = evaluate_link(&v, &h, &[0.5]).unwrap();
        assert!((res.rate[0] - 1.0).abs() < 1e-12);
        assert!(evaluate_link(&v, &h, &[0.0]).is_err());
    }

    #[test]
    fn evaluate_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = random_matrix(&mut rng, 5, 5);
        let est = &h + random_matrix(&mut rng, 5, 5) * Complex64::new(0.1, 0.0);
        let v = zf_precoder(&est, DEFAULT_CONDITION_CAP).unwrap();
        let noise = [0.5, 0.4, 0.3, 0.2, 0.1];
        let res = evaluate_link(&v, &h, &noise).unwrap();
        // direct double loop over v_l^H h_k
        let mut total = 0.0;
        for k in 0..5 {
            let mut terms = [0.0; 5];
            for (l, t) in terms.iter_mut().enumerate() {
                let mut acc = Complex64::new(0.0, 0.0);
                for n in 0..5 {
                    acc += v[(l, n)] * h[(n, k)];
                }
                *t = acc.norm_sqr();
            }
            let interf: f64 = terms.iter().enumerate().filter(|(l, _)| *l != k).map(|(_, t)| t).sum();
            total += (1.0 + terms[k] / (interf + noise[k])).log2();
        }
        assert!((res.sum_rate - total).abs() < 1e-10);
        assert!((res.sum_rate - res.rate.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn row_phase_rotation_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_matrix(&mut rng, 5, 3);
        let est = &h + random_matrix(&mut rng, 5, 3) * Complex64::new(0.2, 0.0);
        let v = zf_precoder(&est, DEFAULT_CONDITION_CAP).unwrap();
        let mut rotated = v.clone();
        for (i, mut row) in rotated.row_iter_mut().enumerate() {
            row *= Complex64::from_polar(1.0, 0.7 * i as f64 + 0.1);
        }
        let a = evaluate_link(&v, &h, &[0.5; 3]).unwrap();
        let b = evaluate_link(&rotated, &h, &[0.5; 3]).unwrap();
        for (x, y) in a.sinr.iter().zip(&b.sinr) {
            assert!((x - y).abs() < 1e-10 * x.max(1.0));
        }
    }
}

//! Rician channels between the base station, the omni-surface and the UEs,
//! plus Gauss-Markov UE mobility.
//!
//! Conventions: the base station carries an `N`-element uniform linear array
//! along the x-axis, the surface an `M`-element array along the y-axis, and
//! every UE a single antenna. `H_BO` is `N x M`, `H_OU` is `M x K` and `H_BU`
//! is `N x K`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Axis-aligned rectangle `[x_min, x_max) x [y_min, y_max)` in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Area {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    /// Base station position.
    pub bs: [f64; 3],
    /// Surface position.
    pub ios: [f64; 3],
    pub ue_area: Area,
    pub ue_height: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            bs: [0.0, 0.0, 10.0],
            ios: [-2.0, 5.0, 5.0],
            ue_area: Area {
                x_min: -10.0,
                x_max: 10.0,
                y_min: -10.0,
                y_max: 10.0,
            },
            ue_height: 1.5,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let a = &self.ue_area;
        if !(a.x_max > a.x_min && a.y_max > a.y_min) {
            return Err(Error::Config("UE area must have positive width and depth".into()));
        }
        if self.bs == self.ios {
            return Err(Error::DegenerateGeometry("BS and surface are co-located".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Reflected,
    Refracted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UeState {
    pub position: [f64; 3],
    /// Speed in m/s, never negative.
    pub velocity: f64,
    /// Heading in radians, measured from the x-axis.
    pub heading: f64,
    /// This UE's asymptotic mean heading. Starts at the configured mean and is
    /// mirrored together with the heading whenever the UE bounces off an edge.
    pub mean_heading: f64,
    pub side: Side,
}

/// Gauss-Markov parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MobilityParams {
    pub memory: f64,
    pub mean_velocity: f64,
    pub velocity_std: f64,
    pub mean_heading: f64,
    pub heading_std: f64,
}

impl Default for MobilityParams {
    fn default() -> Self {
        Self {
            memory: 0.5,
            mean_velocity: 1.0,
            velocity_std: 0.5,
            mean_heading: 30f64.to_radians(),
            heading_std: 10f64.to_radians(),
        }
    }
}

impl MobilityParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.memory) {
            return Err(Error::Config(format!("mobility memory {} outside [0, 1]", self.memory)));
        }
        if self.velocity_std < 0.0 || self.heading_std < 0.0 {
            return Err(Error::Config("mobility standard deviations must be non-negative".into()));
        }
        Ok(())
    }
}

/// The three sub-channels of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// Direct BS-UE channel, `N x K`.
    pub h_bu: CMatrix,
    /// BS-surface channel, `N x M`.
    pub h_bo: CMatrix,
    /// Surface-UE channel, `M x K`.
    pub h_ou: CMatrix,
    pub rician_factor: f64,
}

impl ChannelSet {
    pub fn antennas(&self) -> usize {
        self.h_bu.nrows()
    }

    pub fn elements(&self) -> usize {
        self.h_bo.ncols()
    }

    pub fn users(&self) -> usize {
        self.h_bu.ncols()
    }

    /// Draws a fresh realization for the given UE positions: line-of-sight
    /// parts follow the geometry, scattered parts are redrawn.
    pub fn draw<R: Rng + ?Sized>(
        geom: &Geometry,
        ues: &[UeState],
        antennas: usize,
        elements: usize,
        rician_factor: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let (psi_o, psi_b) = directional_cosines(geom)?;
        let bo_los = los_matrix(psi_b, psi_o, antennas, elements)?;
        let h_bo = sample_rician(&bo_los, rician_factor, rng)?;

        let k = ues.len();
        let mut bu_los = CMatrix::zeros(antennas, k);
        let mut ou_los = CMatrix::zeros(elements, k);
        for (col, ue) in ues.iter().enumerate() {
            let to_ue_from_bs = unit_direction(&geom.bs, &ue.position)?;
            let to_ue_from_ios = unit_direction(&geom.ios, &ue.position)?;
            bu_los.set_column(col, &steering_vector(to_ue_from_bs[0], antennas)?);
            ou_los.set_column(col, &steering_vector(to_ue_from_ios[1], elements)?);
        }
        let h_bu = sample_rician(&bu_los, rician_factor, rng)?;
        let h_ou = sample_rician(&ou_los, rician_factor, rng)?;
        Ok(Self {
            h_bu,
            h_bo,
            h_ou,
            rician_factor,
        })
    }
}

/// `[1, e^{j pi phi}, ..., e^{j (len-1) pi phi}]`.
pub fn steering_vector(phi: f64, length: usize) -> Result<CVector> {
    if length == 0 {
        return Err(invalid("steering vector length must be at least 1"));
    }
    Ok(CVector::from_iterator(
        length,
        (0..length).map(|m| Complex64::from_polar(1.0, PI * phi * m as f64)),
    ))
}

fn unit_direction(from: &[f64; 3], to: &[f64; 3]) -> Result<[f64; 3]> {
    let d = [to[0] - from[0], to[1] - from[1], to[2] - from[2]];
    let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::DegenerateGeometry(format!("coincident points {from:?} and {to:?}")));
    }
    Ok([d[0] / norm, d[1] / norm, d[2] / norm])
}

/// Directional cosines `(psi_O, psi_B)` of the BS-surface link: the y- and
/// x-projections of the unit vector from the surface to the BS.
pub fn directional_cosines(geom: &Geometry) -> Result<(f64, f64)> {
    let u = unit_direction(&geom.ios, &geom.bs)?;
    Ok((u[1], u[0]))
}

/// Rank-one line-of-sight matrix `w(psi_rx) w(psi_tx)^H`.
pub fn los_matrix(psi_rx: f64, psi_tx: f64, rows: usize, cols: usize) -> Result<CMatrix> {
    let rx = steering_vector(psi_rx, rows)?;
    let tx = steering_vector(psi_tx, cols)?;
    Ok(&rx * tx.adjoint())
}

/// One circularly-symmetric complex normal sample with unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * FRAC_1_SQRT_2, im * FRAC_1_SQRT_2)
}

pub fn sample_rician<R: Rng + ?Sized>(los: &CMatrix, lambda: f64, rng: &mut R) -> Result<CMatrix> {
    if !(lambda >= 0.0) {
        return Err(invalid(format!("Rician factor must be non-negative, got {lambda}")));
    }
    if los.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(invalid("line-of-sight matrix has non-finite entries"));
    }
    let los_weight = (lambda / (lambda + 1.0)).sqrt();
    let nlos_weight = (1.0 / (lambda + 1.0)).sqrt();
    // column-major fill keeps the draw order fixed
    Ok(CMatrix::from_fn(los.nrows(), los.ncols(), |r, c| {
        los[(r, c)] * los_weight + complex_normal(rng) * nlos_weight
    }))
}

fn reflect_into(mut x: f64, lo: f64, hi: f64) -> (f64, bool) {
    let mut flipped = false;
    // a step can be longer than the area, so bounce until inside
    while x < lo || x > hi {
        if x < lo {
            x = 2.0 * lo - x;
        } else {
            x = 2.0 * hi - x;
        }
        flipped = !flipped;
    }
    (x, flipped)
}

/// One Gauss-Markov step. Positions are reflected specularly at the area
/// boundary and the heading is mirrored with them.
pub fn step_mobility<R: Rng + ?Sized>(
    state: &UeState,
    params: &MobilityParams,
    dt: f64,
    geom: &Geometry,
    rng: &mut R,
) -> UeState {
    let k = params.memory;
    let innovation = (1.0 - k * k).max(0.0).sqrt();
    let xi_v: f64 = rng.sample(StandardNormal);
    let xi_h: f64 = rng.sample(StandardNormal);
    let velocity = (k * state.velocity
        + (1.0 - k) * params.mean_velocity
        + innovation * params.velocity_std * xi_v)
        .max(0.0);
    let mut heading =
        k * state.heading + (1.0 - k) * state.mean_heading + innovation * params.heading_std * xi_h;
    let mut mean_heading = state.mean_heading;

    let area = &geom.ue_area;
    let x = state.position[0] + velocity * dt * heading.cos();
    let y = state.position[1] + velocity * dt * heading.sin();
    let (x, flip_x) = reflect_into(x, area.x_min, area.x_max);
    let (y, flip_y) = reflect_into(y, area.y_min, area.y_max);
    if flip_x {
        heading = PI - heading;
        mean_heading = PI - mean_heading;
    }
    if flip_y {
        heading = -heading;
        mean_heading = -mean_heading;
    }
    UeState {
        position: [x, y, state.position[2]],
        velocity,
        heading,
        mean_heading,
        side: state.side,
    }
}

/// Places UEs uniformly in the area with velocity and heading drawn around
/// their asymptotic means. The first `reflected` UEs sit on the reflection side.
pub fn place_ues<R: Rng + ?Sized>(
    count: usize,
    reflected: usize,
    params: &MobilityParams,
    geom: &Geometry,
    rng: &mut R,
) -> Vec<UeState> {
    (0..count)
        .map(|i| {
            let a = &geom.ue_area;
            let x = rng.random_range(a.x_min..a.x_max);
            let y = rng.random_range(a.y_min..a.y_max);
            let xi_v: f64 = rng.sample(StandardNormal);
            let xi_h: f64 = rng.sample(StandardNormal);
            UeState {
                position: [x, y, geom.ue_height],
                velocity: (params.mean_velocity + params.velocity_std * xi_v).max(0.0),
                heading: params.mean_heading + params.heading_std * xi_h,
                mean_heading: params.mean_heading,
                side: if i < reflected { Side::Reflected } else { Side::Refracted },
            }
        })
        .collect()
}

/// Equivalent channel `H = H_BU + H_BO Phi_i H_OU`, with `Phi_i` picked per
/// UE side. The coefficient matrices are passed as their diagonals.
pub fn aggregate_channel(
    ch: &ChannelSet,
    phi_r: &CVector,
    phi_t: &CVector,
    sides: &[Side],
) -> Result<CMatrix> {
    let k = ch.users();
    let m = ch.elements();
    if sides.len() != k {
        return Err(invalid(format!("{} side labels for {k} UEs", sides.len())));
    }
    if phi_r.len() != m || phi_t.len() != m {
        return Err(invalid("coefficient diagonals must have one entry per element"));
    }
    let mut h = ch.h_bu.clone();
    let mut scaled = CVector::zeros(m);
    for (col, side) in sides.iter().enumerate() {
        let phi = match side {
            Side::Reflected => phi_r,
            Side::Refracted => phi_t,
        };
        for e in 0..m {
            scaled[e] = phi[e] * ch.h_ou[(e, col)];
        }
        let via_surface = &ch.h_bo * &scaled;
        let mut target = h.column_mut(col);
        target += via_surface;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_cosine_gives_all_ones() {
        let w = steering_vector(0.0, 32).unwrap();
        assert!(w.iter().all(|z| *z == Complex64::new(1.0, 0.0)));
    }

    #[test]
    fn steering_element_one() {
        let w = steering_vector(1.0 / 32.0, 32).unwrap();
        assert!((w[1].re - 0.995_184_726_672_196_9).abs() < 1e-12);
        assert!((w[1].im - 0.098_017_140_329_560_6).abs() < 1e-12);
        assert_eq!(w[0], Complex64::new(1.0, 0.0));
    }

    #[test]
    fn opposite_cosines_conjugate() {
        let a = steering_vector(3.0 / 32.0, 32).unwrap();
        let b = steering_vector(-3.0 / 32.0, 32).unwrap();
        assert!((a[31].conj() - b[31]).norm() < 1e-12);
    }

    #[test]
    fn empty_steering_vector_rejected() {
        assert!(matches!(steering_vector(0.1, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn default_geometry_cosines() {
        let (psi_o, psi_b) = directional_cosines(&Geometry::default()).unwrap();
        assert!((psi_o - (-5.0 / 54f64.sqrt())).abs() < 1e-12);
        assert!((psi_b - (2.0 / 54f64.sqrt())).abs() < 1e-12);
        assert!((psi_o + 0.68041).abs() < 1e-4);
        assert!((psi_b - 0.27217).abs() < 1e-4);
    }

    #[test]
    fn axis_aligned_cosines() {
        let mut g = Geometry::default();
        g.ios = [g.bs[0], g.bs[1], 0.0];
        let (o, b) = directional_cosines(&g).unwrap();
        assert_eq!((o, b), (0.0, 0.0));
        g.ios = [g.bs[0] - 3.0, g.bs[1], g.bs[2]];
        let (o, b) = directional_cosines(&g).unwrap();
        assert_eq!((o, b), (0.0, 1.0));
        g.ios = g.bs;
        assert!(matches!(directional_cosines(&g), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn los_matrix_shape_and_rank() {
        let ones = los_matrix(0.0, 0.0, 3, 2).unwrap();
        assert!(ones.iter().all(|z| (*z - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        let (po, pb) = directional_cosines(&Geometry::default()).unwrap();
        let l = los_matrix(po, pb, 32, 5).unwrap();
        assert_eq!(l[(0, 0)], Complex64::new(1.0, 0.0));
        let sv = l.singular_values();
        let top = sv.max();
        assert_eq!(sv.iter().filter(|s| **s > 1e-9 * top).count(), 1);
        let expect = Complex64::from_polar(1.0, PI * (po * 3.0 - pb * 2.0));
        assert!((l[(3, 2)] - expect).norm() < 1e-12);
    }

    #[test]
    fn rician_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let los = los_matrix(0.3, -0.2, 4, 3).unwrap();
        let out = sample_rician(&los, 1e12, &mut rng).unwrap();
        assert!((out - &los).iter().all(|z| z.norm() < 1e-5));
        assert!(sample_rician(&los, -1.0, &mut rng).is_err());
    }

    #[test]
    fn rician_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let los = los_matrix(0.4, 0.0, 1, 1).unwrap();
        let draws = 100_000;
        let mut second = 0.0;
        let mut mean = Complex64::new(0.0, 0.0);
        for _ in 0..draws {
            let z = sample_rician(&los, 0.0, &mut rng).unwrap()[(0, 0)];
            second += z.norm_sqr();
        }
        assert!((second / draws as f64 - 1.0).abs() < 0.03);
        for _ in 0..draws {
            mean += sample_rician(&los, 10.0, &mut rng).unwrap()[(0, 0)];
        }
        let mean = mean / draws as f64;
        let expect = los[(0, 0)] * (10.0f64 / 11.0).sqrt();
        assert!((mean - expect).norm() / expect.norm() < 0.02);
    }

    #[test]
    fn full_memory_keeps_motion() {
        let geom = Geometry::default();
        let params = MobilityParams {
            memory: 1.0,
            ..MobilityParams::default()
        };
        let ue = UeState {
            position: [0.0, 0.0, 1.5],
            velocity: 0.7,
            heading: 0.3,
            mean_heading: 0.3,
            side: Side::Reflected,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let next = step_mobility(&ue, &params, 1.0, &geom, &mut rng);
        assert_eq!(next.velocity, 0.7);
        assert_eq!(next.heading, 0.3);
        assert!((next.position[0] - 0.7 * 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn memoryless_mean_velocity() {
        let geom = Geometry::default();
        let params = MobilityParams {
            memory: 0.0,
            ..MobilityParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ue = place_ues(1, 1, &params, &geom, &mut rng)[0];
        let mut total = 0.0;
        let steps = 100_000;
        for _ in 0..steps {
            ue = step_mobility(&ue, &params, 1.0, &geom, &mut rng);
            total += ue.velocity;
        }
        // clamping at zero lifts the mean slightly above 1 (about 0.4%)
        assert!((total / steps as f64 - 1.0).abs() < 0.03);
    }

    #[test]
    fn boundary_reflection_stays_inside() {
        let geom = Geometry::default();
        let params = MobilityParams {
            memory: 1.0,
            ..MobilityParams::default()
        };
        let ue = UeState {
            position: [9.9, 9.95, 1.5],
            velocity: 2.0,
            heading: std::f64::consts::FRAC_PI_4,
            mean_heading: std::f64::consts::FRAC_PI_4,
            side: Side::Refracted,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let next = step_mobility(&ue, &params, 1.0, &geom, &mut rng);
        assert!(next.position[0] < 10.0 && next.position[1] < 10.0);
        assert!(geom.ue_area.contains(next.position[0], next.position[1]));
        assert_eq!(next.side, Side::Refracted);
    }

    #[test]
    fn mobility_is_reproducible() {
        let geom = Geometry::default();
        let params = MobilityParams::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ue = place_ues(1, 1, &params, &geom, &mut rng)[0];
            for _ in 0..50 {
                ue = step_mobility(&ue, &params, 1.0, &geom, &mut rng);
            }
            ue
        };
        assert_eq!(run(9).position.map(f64::to_bits), run(9).position.map(f64::to_bits));
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, m: usize, k: usize) -> ChannelSet {
        let mut g = |r, c| CMatrix::from_fn(r, c, |_, _| complex_normal(rng));
        ChannelSet {
            h_bu: g(n, k),
            h_bo: g(n, m),
            h_ou: g(m, k),
            rician_factor: 0.0,
        }
    }

    #[test]
    fn surface_off_leaves_direct_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ch = random_set(&mut rng, 5, 8, 3);
        let zero = CVector::zeros(8);
        let sides = [Side::Reflected, Side::Refracted, Side::Reflected];
        let h = aggregate_channel(&ch, &zero, &zero, &sides).unwrap();
        assert_eq!(h, ch.h_bu);
        assert!(aggregate_channel(&ch, &zero, &zero, &sides[..2]).is_err());
    }

    #[test]
    fn scalar_composition() {
        let c = |re, im| Complex64::new(re, im);
        let ch = ChannelSet {
            h_bu: CMatrix::from_element(1, 1, c(0.5, -0.25)),
            h_bo: CMatrix::from_element(1, 1, c(1.0, 2.0)),
            h_ou: CMatrix::from_element(1, 1, c(-0.5, 0.75)),
            rician_factor: 0.0,
        };
        let coeff = Complex64::from_polar(0.8, 0.6);
        let phi = CVector::from_element(1, coeff);
        let h = aggregate_channel(&ch, &phi, &CVector::zeros(1), &[Side::Reflected]).unwrap();
        // (1+2j)(-0.5+0.75j) = -2 - 0.25j
        let expect = c(0.5, -0.25) + coeff * c(-2.0, -0.25);
        assert!((h[(0, 0)] - expect).norm() < 1e-14);
    }

    #[test]
    fn reflected_users_ignore_refraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ch = random_set(&mut rng, 4, 6, 2);
        let phi_r = CVector::from_fn(6, |_, _| complex_normal(&mut rng));
        let a = CVector::from_fn(6, |_, _| complex_normal(&mut rng));
        let b = CVector::from_fn(6, |_, _| complex_normal(&mut rng));
        let sides = [Side::Reflected, Side::Reflected];
        assert_eq!(
            aggregate_channel(&ch, &phi_r, &a, &sides).unwrap(),
            aggregate_channel(&ch, &phi_r, &b, &sides).unwrap()
        );
    }

    #[test]
    fn aggregate_is_affine_in_coefficients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ch = random_set(&mut rng, 5, 6, 4);
        let sides = [Side::Reflected, Side::Refracted, Side::Reflected, Side::Refracted];
        let mut v = || CVector::from_fn(6, |_, _| complex_normal(&mut rng));
        let (r1, r2, t1, t2) = (v(), v(), v(), v());
        let zero = CVector::zeros(6);
        let f = |r: &CVector, t: &CVector| aggregate_channel(&ch, r, t, &sides).unwrap() - &ch.h_bu;
        let lhs = f(&(&r1 + &r2), &(&t1 + &t2));
        let rhs = f(&r1, &t1) + f(&r2, &t2);
        assert!((&lhs - &rhs).norm() <= 1e-10 * lhs.norm());
        let s = Complex64::new(0.3, -1.2);
        let lhs = f(&(&r1 * s), &zero);
        let rhs = f(&r1, &zero) * s;
        assert!((&lhs - &rhs).norm() <= 1e-10 * lhs.norm());
    }
}

//! THz link model: LoS path gain with molecular absorption, absorption noise,
//! RIS phase quantization, coherent array gain and per-slot rates.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LinkGeometry;

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelParams {
    /// Feeder transmit power, W.
    pub tx_power_w: f64,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    /// Molecular absorption coefficient, 1/m.
    pub absorption_per_m: f64,
    pub temperature_k: f64,
    /// Meta-surfaces per RIS.
    pub meta_surfaces: usize,
    /// Number of quantized phase levels per meta-surface.
    pub phase_levels: usize,
    pub slot_s: f64,
    /// Bits per VR image.
    pub image_bits: f64,
    /// Distances are floored here so the inverse-square law stays finite.
    pub min_link_distance: f64,
}

impl Default for ChannelParams {
    fn default() -> Self {
        ChannelParams {
            tx_power_w: 1.0,
            carrier_hz: 1e12,
            bandwidth_hz: 30e9,
            absorption_per_m: 0.0016,
            temperature_k: 300.0,
            meta_surfaces: 64,
            phase_levels: 16,
            slot_s: 1e-3,
            image_bits: 1e7,
            min_link_distance: 1.0,
        }
    }
}

impl ChannelParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("tx_power_w", self.tx_power_w),
            ("carrier_hz", self.carrier_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("temperature_k", self.temperature_k),
            ("slot_s", self.slot_s),
            ("min_link_distance", self.min_link_distance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.absorption_per_m >= 0.0) || !self.absorption_per_m.is_finite() {
            return Err(Error::invalid(format!(
                "absorption_per_m must be non-negative, got {}",
                self.absorption_per_m
            )));
        }
        if self.meta_surfaces == 0 {
            return Err(Error::invalid("meta_surfaces must be at least 1"));
        }
        if self.phase_levels < 2 {
            return Err(Error::invalid(format!(
                "phase_levels must be at least 2, got {}",
                self.phase_levels
            )));
        }
        if !(self.image_bits >= 1.0) || !self.image_bits.is_finite() {
            return Err(Error::invalid(format!("image_bits must be >= 1, got {}", self.image_bits)));
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    /// A0 = c^2 / (16 pi^2 f^2).
    pub fn a0(&self) -> f64 {
        let c = SPEED_OF_LIGHT;
        c * c / (16.0 * PI * PI * self.carrier_hz * self.carrier_hz)
    }

    /// Thermal noise floor N0 = W lambda^2 / (4 pi) k_B T0.
    pub fn thermal_noise(&self) -> f64 {
        let lambda = self.wavelength();
        self.bandwidth_hz * lambda * lambda / (4.0 * PI) * BOLTZMANN * self.temperature_k
    }

    /// Images per slot carried by `rate_bps`.
    pub fn images_per_slot(&self, rate_bps: f64) -> f64 {
        rate_bps * self.slot_s / self.image_bits
    }

    /// Upper bound on any link's image rate: shortest distance, perfect
    /// alignment and the bare thermal floor.
    pub fn rate_ceiling_images(&self) -> f64 {
        let h = path_gain_unchecked(self.min_link_distance, self);
        let n = self.meta_surfaces as f64;
        let r = rate_bps(self.tx_power_w, h, n * n, self.thermal_noise(), self.bandwidth_hz);
        self.images_per_slot(r)
    }
}

fn path_gain_unchecked(d: f64, params: &ChannelParams) -> f64 {
    let free = params.wavelength() / (4.0 * PI * d);
    let absorb = (-params.absorption_per_m * d).exp();
    free * free * absorb * absorb
}

fn check_distance(d: f64, params: &ChannelParams) -> Result<()> {
    if !(d >= params.min_link_distance) || !d.is_finite() {
        return Err(Error::invalid(format!(
            "link distance {d} m is below the {} m floor",
            params.min_link_distance
        )));
    }
    Ok(())
}

/// LoS power gain `(lambda / (4 pi d))^2 * exp(-k d)^2`.
pub fn path_gain(d: f64, params: &ChannelParams) -> Result<f64> {
    check_distance(d, params)?;
    Ok(path_gain_unchecked(d, params))
}

/// Thermal floor plus molecular re-radiation from every RIS at the given distances.
pub fn noise_power(distances_to_all_ris: &[f64], params: &ChannelParams) -> Result<f64> {
    let a0 = params.a0();
    let mut absorbed = 0.0;
    for &d in distances_to_all_ris {
        check_distance(d, params)?;
        absorbed += params.tx_power_w * a0 / (d * d) * (-(-params.absorption_per_m * d).exp_m1());
    }
    Ok(params.thermal_noise() + absorbed)
}

/// Shannon rate `W log2(1 + p h G / N)` in bits per second.
pub fn rate_bps(tx_power_w: f64, gain: f64, array_gain: f64, noise_w: f64, bandwidth_hz: f64) -> f64 {
    bandwidth_hz * (tx_power_w * gain * array_gain / noise_w).ln_1p() / std::f64::consts::LN_2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseVector {
    phases: Vec<f64>,
}

impl PhaseVector {
    pub fn new(phases: Vec<f64>) -> Result<Self> {
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(Error::invalid("phases must be finite"));
        }
        Ok(PhaseVector { phases })
    }

    /// Draws `n` phases i.i.d. uniform on `[-pi, pi)`.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        PhaseVector {
            phases: (0..n).map(|_| rng.random_range(-PI..PI)).collect(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }
}

/// The quantized set {-pi + 2 z pi / (Z - 1) | z = 0..Z-1}.
pub fn phase_grid(z_levels: usize) -> Result<Vec<f64>> {
    if z_levels < 2 {
        return Err(Error::invalid(format!("need at least 2 phase levels, got {z_levels}")));
    }
    let step = 2.0 * PI / (z_levels - 1) as f64;
    Ok((0..z_levels).map(|z| -PI + z as f64 * step).collect())
}

/// Maps each phase to its nearest grid level; ties go to the smaller level.
pub fn quantize_phase(psi: &PhaseVector, z_levels: usize) -> Result<PhaseVector> {
    let grid = phase_grid(z_levels)?;
    let step = 2.0 * PI / (z_levels - 1) as f64;
    let last = z_levels - 1;
    let phases = psi
        .phases
        .iter()
        .map(|&p| {
            let lo = (((p + PI) / step).floor().max(0.0) as usize).min(last);
            let hi = (lo + 1).min(last);
            if (p - grid[hi]).abs() < (p - grid[lo]).abs() {
                grid[hi]
            } else {
                grid[lo]
            }
        })
        .collect();
    Ok(PhaseVector { phases })
}

/// Coherent combining gain `|sum_n exp(j (phi_n - psi_n))|^2`.
pub fn array_gain(phi: &PhaseVector, psi: &PhaseVector) -> Result<f64> {
    if phi.len() != psi.len() {
        return Err(Error::dims(format!(
            "phase vectors differ in length: {} vs {}",
            phi.len(),
            psi.len()
        )));
    }
    let sum: Complex64 = phi
        .phases
        .iter()
        .zip(&psi.phases)
        .map(|(a, b)| Complex64::from_polar(1.0, a - b))
        .sum();
    Ok(sum.norm_sqr())
}

/// Per-link rates for one slot, row-major over (RIS, user).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMatrix {
    num_ris: usize,
    num_users: usize,
    r_bps: Vec<f64>,
    r_images: Vec<f64>,
}

impl RateMatrix {
    /// Builds a matrix from image rates; bit rates follow from `params`.
    pub fn from_images(num_ris: usize, num_users: usize, r_images: Vec<f64>, params: &ChannelParams) -> Result<Self> {
        if r_images.len() != num_ris * num_users {
            return Err(Error::dims(format!(
                "rate matrix {num_ris}x{num_users} needs {} entries, got {}",
                num_ris * num_users,
                r_images.len()
            )));
        }
        if r_images.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid("rates must be finite and non-negative"));
        }
        let r_bps = r_images
            .iter()
            .map(|r| r * params.image_bits / params.slot_s)
            .collect();
        Ok(RateMatrix {
            num_ris,
            num_users,
            r_bps,
            r_images,
        })
    }

    pub fn zeros(num_ris: usize, num_users: usize) -> Self {
        RateMatrix {
            num_ris,
            num_users,
            r_bps: vec![0.0; num_ris * num_users],
            r_images: vec![0.0; num_ris * num_users],
        }
    }

    pub fn num_ris(&self) -> usize {
        self.num_ris
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn bps(&self, b: usize, u: usize) -> f64 {
        self.r_bps[b * self.num_users + u]
    }

    pub fn images(&self, b: usize, u: usize) -> f64 {
        self.r_images[b * self.num_users + u]
    }

    pub fn images_flat(&self) -> &[f64] {
        &self.r_images
    }

    pub fn bps_flat(&self) -> &[f64] {
        &self.r_bps
    }

    pub fn max_images(&self) -> f64 {
        self.r_images.iter().copied().fold(0.0, f64::max)
    }
}

/// Channel phases of every meta-surface on every link, row-major over (RIS, user).
pub fn draw_channel_phases<R: Rng + ?Sized>(
    num_ris: usize,
    num_users: usize,
    meta_surfaces: usize,
    rng: &mut R,
) -> Vec<PhaseVector> {
    (0..num_ris * num_users)
        .map(|_| PhaseVector::random(meta_surfaces, rng))
        .collect()
}

/// Rates of every link when the controller matches the quantized channel phases.
pub fn link_rate(geom: &LinkGeometry, psi_all: &[PhaseVector], params: &ChannelParams) -> Result<RateMatrix> {
    let (nb, nu) = (geom.num_ris(), geom.num_users());
    if psi_all.len() != nb * nu {
        return Err(Error::dims(format!(
            "need {} channel phase vectors, got {}",
            nb * nu,
            psi_all.len()
        )));
    }
    let noise: Vec<f64> = (0..nu)
        .map(|u| noise_power(&geom.distances_to_user(u), params))
        .collect::<Result<_>>()?;
    let mut r_bps = Vec::with_capacity(nb * nu);
    for b in 0..nb {
        for u in 0..nu {
            let psi = &psi_all[b * nu + u];
            if psi.len() != params.meta_surfaces {
                return Err(Error::dims(format!(
                    "link ({b},{u}) has {} phases, expected {}",
                    psi.len(),
                    params.meta_surfaces
                )));
            }
            if !geom.los(b, u) {
                r_bps.push(0.0);
                continue;
            }
            let h = path_gain(geom.distance(b, u), params)?;
            let phi = quantize_phase(psi, params.phase_levels)?;
            let g = array_gain(&phi, psi)?;
            r_bps.push(rate_bps(params.tx_power_w, h, g, noise[u], params.bandwidth_hz));
        }
    }
    let r_images = r_bps.iter().map(|&r| params.images_per_slot(r)).collect();
    Ok(RateMatrix {
        num_ris: nb,
        num_users: nu,
        r_bps,
        r_images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, StreamId};

    #[test]
    fn free_space_when_absorption_vanishes() {
        let p = ChannelParams {
            absorption_per_m: 0.0,
            ..Default::default()
        };
        let lambda = p.wavelength();
        for d in [1.0, 3.7, 10.0, 25.0] {
            let expect = (lambda / (4.0 * PI * d)).powi(2);
            assert_eq!(path_gain(d, &p).unwrap(), expect);
        }
        let g1 = path_gain(5.0, &p).unwrap();
        let g2 = path_gain(10.0, &p).unwrap();
        assert!((g1 / g2 - 4.0).abs() < 1e-12);
    }

    #[test]
    fn path_gain_rejects_short_links() {
        let p = ChannelParams::default();
        assert!(path_gain(0.5, &p).is_err());
        assert!(path_gain(f64::NAN, &p).is_err());
        assert!(noise_power(&[10.0, 0.2], &p).is_err());
    }

    #[test]
    fn noise_without_absorption_is_thermal() {
        let p = ChannelParams {
            absorption_per_m: 0.0,
            ..Default::default()
        };
        assert_eq!(noise_power(&[3.0, 10.0], &p).unwrap(), p.thermal_noise());
        let q = ChannelParams::default();
        assert_eq!(noise_power(&[], &q).unwrap(), q.thermal_noise());
        assert!(noise_power(&[10.0], &q).unwrap() > q.thermal_noise());
    }

    #[test]
    fn two_level_grid_rounds_to_pi() {
        let psi = PhaseVector::new(vec![0.1, -0.1, 0.0]).unwrap();
        let q = quantize_phase(&psi, 2).unwrap();
        assert_eq!(q.as_slice(), &[PI, -PI, -PI]);
    }

    #[test]
    fn grid_points_are_fixed() {
        let grid = phase_grid(9).unwrap();
        let psi = PhaseVector::new(grid.clone()).unwrap();
        assert_eq!(quantize_phase(&psi, 9).unwrap().as_slice(), grid.as_slice());
        assert!(quantize_phase(&psi, 1).is_err());
    }

    #[test]
    fn fine_grid_error_bounded_by_half_step() {
        let mut rng = stream(11, StreamId::ChannelPhase);
        let psi = PhaseVector::random(5000, &mut rng);
        let z = 1024;
        let q = quantize_phase(&psi, z).unwrap();
        let bound = PI / (z - 1) as f64 + 1e-15;
        for (a, b) in q.as_slice().iter().zip(psi.as_slice()) {
            assert!((a - b).abs() <= bound);
        }
    }

    #[test]
    fn array_gain_cases() {
        let mut rng = stream(5, StreamId::ChannelPhase);
        let psi = PhaseVector::random(64, &mut rng);
        assert_eq!(array_gain(&psi, &psi).unwrap(), 4096.0);

        let zero = PhaseVector::new(vec![0.0, 0.0]).unwrap();
        let opp = PhaseVector::new(vec![0.0, PI]).unwrap();
        assert!(array_gain(&opp, &zero).unwrap() < 1e-24);

        let quarter = PhaseVector::new(vec![0.0, PI / 2.0, PI, 1.5 * PI]).unwrap();
        let zeros = PhaseVector::new(vec![0.0; 4]).unwrap();
        assert!(array_gain(&quarter, &zeros).unwrap() < 1e-24);

        assert!(array_gain(&zero, &quarter).is_err());
    }

    #[test]
    fn shannon_rate_worked_example() {
        let r = rate_bps(1.0, 5.52e-12, 4096.0, 9.047e-14, 30e9);
        // independently evaluated at 40 digits: 5.379327227405904e11
        assert!((r / 5.379_327_227_405_904e11 - 1.0).abs() < 1e-12);
        let p = ChannelParams::default();
        assert!((p.images_per_slot(r) - 53.793_272_274_059).abs() < 1e-9);
    }

    #[test]
    fn blocked_links_have_zero_rate() {
        let p = ChannelParams::default();
        let geom = LinkGeometry::new(2, 1, vec![false, true], vec![10.0, 10.0]).unwrap();
        let mut rng = stream(9, StreamId::ChannelPhase);
        let psi = draw_channel_phases(2, 1, p.meta_surfaces, &mut rng);
        let rates = link_rate(&geom, &psi, &p).unwrap();
        assert_eq!(rates.bps(0, 0), 0.0);
        assert_eq!(rates.images(0, 0), 0.0);
        assert!(rates.images(1, 0) > 0.0);
        let expect = rates.bps(1, 0) * p.slot_s / p.image_bits;
        assert!((rates.images(1, 0) - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn link_rate_checks_shapes() {
        let p = ChannelParams::default();
        let geom = LinkGeometry::new(2, 1, vec![true, true], vec![10.0, 10.0]).unwrap();
        let mut rng = stream(9, StreamId::ChannelPhase);
        let psi = draw_channel_phases(1, 1, p.meta_surfaces, &mut rng);
        assert!(link_rate(&geom, &psi, &p).is_err());
        let short = draw_channel_phases(2, 1, 8, &mut rng);
        assert!(link_rate(&geom, &short, &p).is_err());
    }

    #[test]
    fn validation_catches_bad_params() {
        assert!(ChannelParams::default().validate().is_ok());
        let bad = [
            ChannelParams { phase_levels: 1, ..Default::default() },
            ChannelParams { tx_power_w: 0.0, ..Default::default() },
            ChannelParams { image_bits: 0.5, ..Default::default() },
            ChannelParams { absorption_per_m: -1.0, ..Default::default() },
            ChannelParams { meta_surfaces: 0, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err());
        }
    }
}

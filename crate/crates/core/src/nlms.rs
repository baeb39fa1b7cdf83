//! Per-bin multi-tap NLMS in the STFT domain. Each of the 481 bins runs an
//! independent complex adaptive filter over the last `taps` reference frames.
//!
//! The step is normalised by `‖x‖² + delta + err_reg·taps·σ²`, where `σ²`
//! is a smoothed power of the bin's error. With a fixed `delta` alone, bins
//! where the reference sits far below the near-end signal (noise, talk)
//! random-walk their weights to huge values, and the next reference onset
//! then multiplies them out. The error term scales with the signal, so the
//! filter stays scale invariant, and it shrinks to nothing once the echo is
//! cancelled in a clean bin. `err_reg = 0` gives the plain update.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spacing of the fixed-point grid the linear stage works on. Microphone
/// and echo-estimate values are rounded to multiples of it, which makes
/// `e = mic − y` exact and therefore `e + y == mic` bit-for-bit, as long as
/// magnitudes stay below 2^15 (STFT bins of full-scale audio stay below 2^10).
pub const GRID: f64 = 1.0 / (1u64 << 38) as f64;

#[inline]
pub fn snap(v: f64) -> f64 {
    (v * (1u64 << 38) as f64).round() * GRID
}

#[inline]
pub fn snap_complex(c: Complex64) -> Complex64 {
    Complex64::new(snap(c.re), snap(c.im))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlmsConfig {
    pub taps: usize,
    pub mu: f64,
    pub delta: f64,
    pub bins: usize,
    /// Weight of the smoothed error power in the normaliser.
    pub err_reg: f64,
    /// One-pole smoothing factor of the error power.
    pub err_smoothing: f64,
}

impl Default for NlmsConfig {
    fn default() -> Self {
        Self {
            taps: 8,
            mu: 0.5,
            delta: 1e-6,
            bins: 481,
            err_reg: 1.0,
            err_smoothing: 0.9,
        }
    }
}

impl NlmsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu <= 2.0) {
            return Err(Error::Config(format!(
                "NLMS step size must lie in (0, 2], got {}",
                self.mu
            )));
        }
        if self.taps == 0 || self.bins == 0 {
            return Err(Error::Config("NLMS needs at least one tap and one bin".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!(
                "NLMS regularisation must be positive, got {}",
                self.delta
            )));
        }
        if !(self.err_reg >= 0.0 && self.err_reg.is_finite()) {
            return Err(Error::Config(format!(
                "NLMS error regularisation must be finite and non-negative, got {}",
                self.err_reg
            )));
        }
        if !(0.0..1.0).contains(&self.err_smoothing) {
            return Err(Error::Config(format!(
                "NLMS error smoothing must lie in [0, 1), got {}",
                self.err_smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlmsState {
    cfg: NlmsConfig,
    /// `[bins × taps]`, tap 0 applies to the newest reference frame.
    weights: Vec<Complex64>,
    /// `[bins × taps]`, most recent first.
    history: Vec<Complex64>,
    /// Smoothed `|e|²` per bin.
    err_power: Vec<f64>,
}

impl NlmsState {
    pub fn new(cfg: NlmsConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.bins * cfg.taps;
        Ok(Self {
            cfg,
            weights: vec![Complex64::default(); n],
            history: vec![Complex64::default(); n],
            err_power: vec![0.0; cfg.bins],
        })
    }

    pub fn config(&self) -> &NlmsConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &[Complex64] {
        &self.weights
    }

    pub fn weight(&self, bin: usize, tap: usize) -> Complex64 {
        self.weights[bin * self.cfg.taps + tap]
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn reset(&mut self) {
        self.weights.fill(Complex64::default());
        self.history.fill(Complex64::default());
        self.err_power.fill(0.0);
    }

    /// One adaptation step. Writes the error `e = mic − y` and the linear
    /// echo estimate `y` for this frame, both on the [`GRID`]. `mic` is
    /// snapped to the grid first, so callers that pass grid-aligned frames
    /// (see [`snap_complex`]) get `e + y == mic` exactly. A frame containing
    /// non-finite values is rejected and leaves the state untouched.
    pub fn step(
        &mut self,
        mic: &[Complex64],
        reference: &[Complex64],
        e: &mut [Complex64],
        y: &mut [Complex64],
    ) -> Result<()> {
        let bins = self.cfg.bins;
        if mic.len() != bins || reference.len() != bins || e.len() != bins || y.len() != bins {
            return Err(Error::Contract(format!("NLMS frames must have {bins} bins")));
        }
        let finite = |c: &Complex64| c.re.is_finite() && c.im.is_finite();
        if !mic.iter().all(finite) || !reference.iter().all(finite) {
            return Err(Error::NonFinite("NLMS input frame".into()));
        }
        let taps = self.cfg.taps;
        let (mu, delta) = (self.cfg.mu, self.cfg.delta);
        let (beta, reg) = (self.cfg.err_smoothing, self.cfg.err_reg * taps as f64);
        for k in 0..bins {
            let hist = &mut self.history[k * taps..(k + 1) * taps];
            hist.copy_within(0..taps - 1, 1);
            hist[0] = reference[k];
            let w = &mut self.weights[k * taps..(k + 1) * taps];

            let mut est = Complex64::default();
            let mut power = 0.0;
            for (wi, xi) in w.iter().zip(hist.iter()) {
                est += wi.conj() * xi;
                power += xi.norm_sqr();
            }
            let est = snap_complex(est);
            let err = snap_complex(mic[k]) - est;
            e[k] = err;
            y[k] = est;

            let sp = &mut self.err_power[k];
            *sp = beta * *sp + (1.0 - beta) * err.norm_sqr();
            let g = err.conj() * (mu / (power + delta + reg * *sp));
            for (wi, xi) in w.iter_mut().zip(hist.iter()) {
                *wi += xi * g;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cnoise(rng: &mut ChaCha8Rng, n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|_| snap_complex(Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))))
            .collect()
    }

    #[test]
    fn init_shapes_and_validation() {
        let st = NlmsState::new(NlmsConfig::default()).unwrap();
        assert_eq!(st.weights().len(), 481 * 8);
        assert!(st.weights().iter().all(|w| *w == Complex64::default()));
        let st = NlmsState::new(NlmsConfig {
            taps: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(st.weights().len(), 481);
        assert!(matches!(
            NlmsState::new(NlmsConfig {
                mu: 3.0,
                ..Default::default()
            }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_reference_passes_mic_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = NlmsState::new(NlmsConfig::default()).unwrap();
        let zero = vec![Complex64::default(); 481];
        let (mut e, mut y) = (zero.clone(), zero.clone());
        for _ in 0..50 {
            let mic = cnoise(&mut rng, 481);
            st.step(&mic, &zero, &mut e, &mut y).unwrap();
            assert_eq!(e, mic);
            assert!(y.iter().all(|v| *v == Complex64::default()));
        }
        assert_eq!(st.weight_norm(), 0.0);
    }

    #[test]
    fn scalar_path_converges() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut st = NlmsState::new(NlmsConfig::default()).unwrap();
        let (mut e, mut y) = (vec![Complex64::default(); 481], vec![Complex64::default(); 481]);
        for _ in 0..200 {
            let x = cnoise(&mut rng, 481);
            let mic: Vec<_> = x.iter().map(|v| v * 0.5).collect();
            st.step(&mic, &x, &mut e, &mut y).unwrap();
        }
        for k in 0..481 {
            assert!((st.weight(k, 0) - Complex64::new(0.5, 0.0)).norm() < 0.025, "bin {k}");
            assert!(e[k].norm() < 1e-3);
        }
    }

    #[test]
    fn non_finite_frame_is_rejected_without_side_effects() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = NlmsState::new(NlmsConfig::default()).unwrap();
        let (mut e, mut y) = (vec![Complex64::default(); 481], vec![Complex64::default(); 481]);
        let x = cnoise(&mut rng, 481);
        st.step(&x, &x, &mut e, &mut y).unwrap();
        let before = st.clone();
        let mut bad = x.clone();
        bad[7] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(st.step(&bad, &x, &mut e, &mut y), Err(Error::NonFinite(_))));
        assert!(matches!(st.step(&x, &bad, &mut e, &mut y), Err(Error::NonFinite(_))));
        assert_eq!(st, before);
    }

    #[test]
    fn scaling_inputs_scales_outputs_not_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = NlmsConfig {
            delta: 1e-12,
            ..Default::default()
        };
        let mut a = NlmsState::new(cfg).unwrap();
        let mut b = NlmsState::new(cfg).unwrap();
        let z = vec![Complex64::default(); 481];
        let (mut ea, mut ya, mut eb, mut yb) = (z.clone(), z.clone(), z.clone(), z.clone());
        for _ in 0..100 {
            let x = cnoise(&mut rng, 481);
            let n = cnoise(&mut rng, 481);
            let mic: Vec<_> = x.iter().zip(&n).map(|(v, n)| v * 0.7 + n * 0.1).collect();
            let x2: Vec<_> = x.iter().map(|v| v * 2.0).collect();
            let m2: Vec<_> = mic.iter().map(|v| v * 2.0).collect();
            a.step(&mic, &x, &mut ea, &mut ya).unwrap();
            b.step(&m2, &x2, &mut eb, &mut yb).unwrap();
            for k in 0..481 {
                assert!((eb[k] - ea[k] * 2.0).norm() <= 1e-6 * (ea[k].norm() * 2.0).max(1e-9));
                assert!((yb[k] - ya[k] * 2.0).norm() <= 1e-6 * (ya[k].norm() * 2.0).max(1e-9));
            }
        }
        for (wa, wb) in a.weights().iter().zip(b.weights()) {
            assert!((wa - wb).norm() <= 1e-6 * wa.norm().max(1e-9));
        }
    }

    #[test]
    fn error_plus_estimate_is_mic_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut st = NlmsState::new(NlmsConfig::default()).unwrap();
        let z = vec![Complex64::default(); 481];
        let (mut e, mut y) = (z.clone(), z.clone());
        for i in 0..2000 {
            // Alternate scales so the estimate regularly overshoots the mic.
            let gain = if (i / 50) % 2 == 0 { 0.7 } else { -0.05 };
            let x = cnoise(&mut rng, 481);
            let n = cnoise(&mut rng, 481);
            let mic: Vec<_> = x
                .iter()
                .zip(&n)
                .map(|(v, n)| snap_complex(v * gain + n * 0.01))
                .collect();
            st.step(&mic, &x, &mut e, &mut y).unwrap();
            for k in 0..481 {
                assert_eq!(e[k] + y[k], mic[k]);
            }
        }
    }

    #[test]
    fn snapping_is_idempotent_and_tiny() {
        for v in [0.0, 1e-9, -0.3, 123.456, -1000.0] {
            let s = snap(v);
            assert_eq!(snap(s), s);
            assert!((s - v).abs() <= GRID / 2.0);
        }
    }
}

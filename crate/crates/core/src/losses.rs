//! Training losses with analytic gradients, and a finite-difference checker.
//!
//! Gradients with respect to a complex estimate are packed as
//! `∂L/∂re + j ∂L/∂im` per bin. All losses are means over their elements.

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_mask: f64,
    pub w_vad: f64,
    pub alpha: f64,
    pub plcpa_p: f64,
    pub echo_weight_beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_mask: 0.5,
            w_vad: 0.1,
            alpha: 10.0,
            plcpa_p: 0.5,
            echo_weight_beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_mask, self.w_vad, self.alpha, self.plcpa_p, self.echo_weight_beta];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<Complex64>,
}

fn same_shape(a: &Spectrogram, b: &Spectrogram, what: &str) -> Result<()> {
    if a.frames != b.frames || a.bins != b.bins {
        return Err(Error::Contract(format!(
            "{what}: shapes {}x{} and {}x{} differ",
            a.frames, a.bins, b.frames, b.bins
        )));
    }
    if a.compression != 1.0 || b.compression != 1.0 {
        return Err(Error::Contract(format!("{what}: inputs must be uncompressed")));
    }
    Ok(())
}

/// Gradient of `(A^p - a^p)^2` with respect to `x = a e^{jφ}`.
#[inline]
fn mag_term(x: Complex64, target_mag_p: f64, p: f64) -> (f64, Complex64) {
    let a = x.norm();
    let ap = a.powf(p);
    let diff = ap - target_mag_p;
    let grad = if a > 0.0 {
        x * (2.0 * p * diff * a.powf(p - 2.0))
    } else {
        Complex64::default()
    };
    (diff * diff, grad)
}

/// Power-law compressed phase-aware loss:
/// `mean[(|S|^p - |Ŝ|^p)^2 + | |S|^p e^{jφS} - |Ŝ|^p e^{jφŜ} |^2]`.
/// The gradient at `Ŝ = 0` is taken as zero.
pub fn loss_plcpa(est: &Spectrogram, reference: &Spectrogram, p: f64) -> Result<LossValue> {
    same_shape(est, reference, "plcpa loss")?;
    let n = est.data.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(est.data.len());
    for (&x, &s) in est.data.iter().zip(&reference.data) {
        let big_a = s.norm();
        let sc = crate::dsp::compress_value(s, p);
        let (m, gm) = mag_term(x, big_a.powf(p), p);
        let a = x.norm();
        let xc = crate::dsp::compress_value(x, p);
        let c = (sc - xc).norm_sqr();
        // |Sc|^2 - 2 Re(conj(Sc) x) a^{p-1} + a^{2p}
        let gc = if a > 0.0 {
            let q = sc.re * x.re + sc.im * x.im;
            let ap1 = a.powf(p - 1.0);
            sc * (-2.0 * ap1) + x * (-2.0 * q * (p - 1.0) * a.powf(p - 3.0) + 2.0 * p * a.powf(2.0 * p - 2.0))
        } else {
            Complex64::default()
        };
        value += m + c;
        grad.push((gm + gc) / n);
    }
    Ok(LossValue { value: value / n, grad })
}

/// Per-bin weights `1 + beta |Z|^p / mean(|Z|^p)`; all ones when the echo
/// is silent.
pub fn echo_weights(echo: &Spectrogram, p: f64, beta: f64) -> Vec<f64> {
    let zp: Vec<f64> = echo.data.iter().map(|z| z.norm().powf(p)).collect();
    let mean = zp.iter().sum::<f64>() / zp.len().max(1) as f64;
    if mean <= 0.0 {
        return vec![1.0; zp.len()];
    }
    zp.iter().map(|v| 1.0 + beta * v / mean).collect()
}

/// Echo-power weighted compressed magnitude loss `mean[w (|S|^p - |Ŝ|^p)^2]`.
pub fn loss_echo_weighted(
    est: &Spectrogram,
    reference: &Spectrogram,
    echo: &Spectrogram,
    p: f64,
    beta: f64,
) -> Result<LossValue> {
    same_shape(est, reference, "echo-weighted loss")?;
    same_shape(est, echo, "echo-weighted loss")?;
    let w = echo_weights(echo, p, beta);
    let n = est.data.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(est.data.len());
    for ((&x, &s), &wi) in est.data.iter().zip(&reference.data).zip(&w) {
        let (m, g) = mag_term(x, s.norm().powf(p), p);
        value += wi * m;
        grad.push(g * (wi / n));
    }
    Ok(LossValue { value: value / n, grad })
}

/// Bins whose energy lies within `floor_db` of the loudest bin.
pub fn activity_mask(input: &[Complex64], floor_db: f64) -> Vec<bool> {
    let peak = input.iter().map(|c| c.norm_sqr()).fold(0.0, f64::max);
    if peak <= 0.0 {
        return vec![false; input.len()];
    }
    let thr = peak * 10f64.powf(floor_db / 10.0);
    input.iter().map(|c| c.norm_sqr() > thr).collect()
}

pub const MASK_ACTIVITY_FLOOR_DB: f64 = -60.0;

/// Complex ratio `target / input` on active bins with magnitude clipped to
/// `clip`; zero elsewhere.
pub fn ideal_mask(target: &[Complex64], input: &[Complex64], active: &[bool], clip: f64) -> Vec<Complex64> {
    target
        .iter()
        .zip(input)
        .zip(active)
        .map(|((&s, &i), &a)| {
            if !a || i.norm_sqr() == 0.0 {
                return Complex64::default();
            }
            let m = s / i;
            let r = m.norm();
            if r > clip {
                m * (clip / r)
            } else {
                m
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLoss {
    pub value: f64,
    pub grad: Vec<Complex64>,
    /// No bin was active; value and gradient are zero.
    pub empty: bool,
}

/// Mean of `|m - m*|^2` over active bins.
pub fn loss_mask(est: &[Complex64], ideal: &[Complex64], active: &[bool]) -> Result<MaskLoss> {
    if est.len() != ideal.len() || est.len() != active.len() {
        return Err(Error::Contract("mask loss: field sizes differ".into()));
    }
    let count = active.iter().filter(|a| **a).count();
    if count == 0 {
        return Ok(MaskLoss {
            value: 0.0,
            grad: vec![Complex64::default(); est.len()],
            empty: true,
        });
    }
    let n = count as f64;
    let mut value = 0.0;
    let grad = est
        .iter()
        .zip(ideal)
        .zip(active)
        .map(|((&m, &t), &a)| {
            if a {
                let d = m - t;
                value += d.norm_sqr();
                d * (2.0 / n)
            } else {
                Complex64::default()
            }
        })
        .collect();
    Ok(MaskLoss {
        value: value / n,
        grad,
        empty: false,
    })
}

pub const VAD_EPS: f64 = 1e-7;

/// Binary cross-entropy, predictions clamped to `[ε, 1-ε]`. Returns the
/// mean loss and its gradient with respect to the predictions (zero where
/// the clamp is active).
pub fn loss_vad(pred: &[f64], label: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != label.len() {
        return Err(Error::Contract("vad loss: lengths differ".into()));
    }
    let n = pred.len().max(1) as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(label)
        .map(|(&p, &y)| {
            let pc = p.clamp(VAD_EPS, 1.0 - VAD_EPS);
            value -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            if pc != p {
                0.0
            } else {
                (-y / pc + (1.0 - y) / (1.0 - pc)) / n
            }
        })
        .collect();
    Ok((value / n, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub echo_weighted: f64,
    pub plcpa: f64,
    pub mask: f64,
    pub vad: f64,
}

/// `echo + plcpa + w_mask * mask + w_vad * vad`.
pub fn loss_wb(c: &LossComponents, w: &LossWeights) -> f64 {
    c.echo_weighted + c.plcpa + w.w_mask * c.mask + w.w_vad * c.vad
}

/// Same as the wide-band sum without the VAD term.
pub fn loss_hb(c: &LossComponents, w: &LossWeights) -> f64 {
    c.echo_weighted + c.plcpa + w.w_mask * c.mask
}

/// `alpha * L_hb + L_wb`.
pub fn loss_final(l_hb: f64, l_wb: f64, alpha: f64) -> f64 {
    alpha * l_hb + l_wb
}

/// Central-difference check of an analytic gradient.
///
/// `f` returns `(value, gradient)` at a point. Each probed coordinate
/// contributes `|g_a - g_fd| / max(|g_a|, |g_fd|, floor)`; the maximum is
/// returned. With `max_coords` set and the point larger than that, a seeded
/// random subset of coordinates is probed.
pub fn grad_check<F>(f: F, point: &[f64], step: f64, max_coords: Option<usize>, seed: u64) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const FLOOR: f64 = 1e-7;
    let (_, analytic) = f(point);
    let coords: Vec<usize> = match max_coords {
        Some(m) if m < point.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = sample(&mut rng, point.len(), m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..point.len()).collect(),
    };
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let (fp, _) = f(&x);
        x[i] = orig - step;
        let (fm, _) = f(&x);
        x[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let ga = analytic[i];
        let err = (ga - fd).abs() / ga.abs().max(fd.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    worst
}

/// Flattens complex values to `[re0, im0, re1, im1, ...]`.
pub fn flatten(c: &[Complex64]) -> Vec<f64> {
    c.iter().flat_map(|v| [v.re, v.im]).collect()
}

pub fn unflatten(x: &[f64]) -> Vec<Complex64> {
    x.chunks_exact(2).map(|v| Complex64::new(v[0], v[1])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(vals: Vec<Complex64>) -> Spectrogram {
        Spectrogram {
            frames: 1,
            bins: vals.len(),
            data: vals,
            compression: 1.0,
        }
    }

    #[test]
    fn plcpa_hand_value() {
        let l = loss_plcpa(
            &spec(vec![Complex64::new(0.0, 0.0)]),
            &spec(vec![Complex64::new(1.0, 0.0)]),
            0.5,
        )
        .unwrap();
        assert_eq!(l.value, 2.0);
        assert_eq!(l.grad[0], Complex64::default());
        let s = spec(vec![Complex64::new(0.3, -2.0), Complex64::new(-1.0, 0.5)]);
        let l = loss_plcpa(&s, &s, 0.5).unwrap();
        assert!(l.value.abs() < 1e-15);
        assert!(l.grad.iter().all(|g| g.norm() < 1e-12));
    }

    #[test]
    fn echo_weight_reduces_and_normalises() {
        let est = spec(vec![
            Complex64::new(0.5, 0.1),
            Complex64::new(2.0, -1.0),
            Complex64::new(0.0, 1.0),
        ]);
        let r = spec(vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 1.0),
            Complex64::new(0.2, 0.0),
        ]);
        let z = spec(vec![
            Complex64::default(),
            Complex64::new(4.0, 0.0),
            Complex64::default(),
        ]);
        let plain = loss_echo_weighted(&est, &r, &z, 0.5, 0.0).unwrap();
        let mag: f64 = est
            .data
            .iter()
            .zip(&r.data)
            .map(|(x, s)| (x.norm().sqrt() - s.norm().sqrt()).powi(2))
            .sum::<f64>()
            / 3.0;
        assert!((plain.value - mag).abs() < 1e-15);
        let w = echo_weights(&z, 0.5, 1.0);
        assert!(w[1] > 1.0);
        assert_eq!(w[0], 1.0);
        assert_eq!(w[2], 1.0);
        assert_eq!(
            echo_weights(&spec(vec![Complex64::default(); 3]), 0.5, 1.0),
            vec![1.0; 3]
        );
    }

    #[test]
    fn mask_loss_empty_and_exact() {
        let m = vec![Complex64::new(1.0, 0.5); 4];
        let out = loss_mask(&m, &m, &[true, false, true, true]).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(!out.empty);
        let out = loss_mask(&m, &[Complex64::default(); 4], &[false; 4]).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.empty);
    }

    #[test]
    fn ideal_mask_clips_and_zeroes_inactive() {
        let s = vec![
            Complex64::new(10.0, 0.0),
            Complex64::new(0.5, 0.5),
            Complex64::new(1.0, 0.0),
        ];
        let i = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(1e-9, 0.0),
        ];
        let act = activity_mask(&i, MASK_ACTIVITY_FLOOR_DB);
        assert_eq!(act, vec![true, true, false]);
        let m = ideal_mask(&s, &i, &act, 2.0);
        assert!((m[0] - Complex64::new(2.0, 0.0)).norm() < 1e-15);
        assert_eq!(m[1], Complex64::new(0.5, 0.5));
        assert_eq!(m[2], Complex64::default());
    }

    #[test]
    fn vad_closed_forms() {
        let (v, _) = loss_vad(&[0.5; 7], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        let (v, _) = loss_vad(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!(v < 1e-6);
    }

    #[test]
    fn weighted_sums() {
        let w = LossWeights::default();
        let ones = LossComponents {
            echo_weighted: 1.0,
            plcpa: 1.0,
            mask: 1.0,
            vad: 1.0,
        };
        assert!((loss_wb(&ones, &w) - 2.6).abs() < 1e-12);
        assert!((loss_hb(&ones, &w) - 2.5).abs() < 1e-12);
        assert!((loss_final(0.1, 0.2, 10.0) - 1.2).abs() < 1e-12);
        assert_eq!(loss_final(0.0, loss_wb(&LossComponents::default(), &w), 10.0), 0.0);
    }

    #[test]
    fn grad_check_quadratic() {
        let f = |x: &[f64]| {
            let v = x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum();
            let g = x.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
            (v, g)
        };
        let p = [0.3, -1.2, 2.5, 0.01];
        assert!(grad_check(f, &p, 1e-4, None, 0) <= 1e-8);
    }
}

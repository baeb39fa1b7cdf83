//! Time-delay estimation between the far-end reference and the microphone.
//!
//! The coarse search correlates sub-band magnitude envelopes (one value per
//! STFT hop) over lags `0..=max_delay / hop`, averaging the per-band Pearson
//! correlation. The winning lag is then refined to a single sample with a
//! phase-transform weighted cross-spectrum over every bin above DC.
//! Reverberation smears envelope energy late, so the envelope peak trails
//! the direct path; the refinement therefore also searches up to
//! `lead_search` samples before the coarse lag.
//!
//! [`estimate_delay`] runs one correlation over whole signals.
//! [`DelayTracker`] is the streaming form: it re-estimates every `block`
//! frames, median-filters the per-block delays, then smooths the median
//! track exponentially.

use std::collections::VecDeque;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::dsp::{stft, StftConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TdeConfig {
    /// Largest delay searched, in samples.
    pub max_delay: usize,
    /// Uniform envelope bands over `0..band_hz`.
    pub num_subbands: usize,
    pub band_hz: f64,
    /// Frames per correlation update in streaming mode.
    pub block: usize,
    /// Exponential smoothing of the median-filtered delay track.
    pub smoothing: f64,
    /// Per-block delays are median-filtered over this many blocks.
    pub median_len: usize,
    /// Sample-resolution refinement with the phase-transform cross-spectrum.
    /// When off, the coarse lag is refined by parabolic interpolation only.
    pub fine_search: bool,
    /// How far before the coarse lag the refinement looks, in samples.
    pub lead_search: usize,
}

impl Default for TdeConfig {
    fn default() -> Self {
        Self {
            max_delay: 24_000,
            num_subbands: 32,
            band_hz: 8_000.0,
            block: 100,
            smoothing: 0.9,
            median_len: 5,
            fine_search: true,
            lead_search: 4_800,
        }
    }
}

impl TdeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_delay == 0 {
            return Err(Error::Config("max_delay must be positive".into()));
        }
        if self.num_subbands == 0 || self.block == 0 || self.median_len == 0 {
            return Err(Error::Config(
                "num_subbands, block and median_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::Config(format!(
                "smoothing must lie in [0, 1), got {}",
                self.smoothing
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayEstimate {
    /// Samples by which the microphone lags the reference.
    pub delay: usize,
    /// Winning normalised correlation, clamped to `[0, 1]`.
    pub confidence: f64,
}

impl DelayEstimate {
    pub fn delay_ms(&self, sample_rate: u32) -> f64 {
        self.delay as f64 * 1000.0 / sample_rate as f64
    }
}

/// Envelope bands over the low bins; the PHAT refinement uses
/// `[lo, phat_hi)`.
#[derive(Debug, Clone)]
struct BandLayout {
    lo: usize,
    phat_hi: usize,
    groups: Vec<(usize, usize)>,
}

impl BandLayout {
    fn new(cfg: &TdeConfig, stft: &StftConfig) -> Result<Self> {
        let hi = ((cfg.band_hz / stft.bin_hz()).round() as usize + 1).min(stft.bins());
        let lo = 1;
        let width = hi.saturating_sub(lo);
        if width < cfg.num_subbands {
            return Err(Error::Config(format!(
                "{} sub-bands do not fit in {} bins",
                cfg.num_subbands, width
            )));
        }
        let groups = (0..cfg.num_subbands)
            .map(|g| {
                (
                    lo + g * width / cfg.num_subbands,
                    lo + (g + 1) * width / cfg.num_subbands,
                )
            })
            .collect();
        Ok(Self {
            lo,
            phat_hi: stft.bins(),
            groups,
        })
    }
}

#[derive(Debug, Clone)]
struct FrameFeatures {
    env: Vec<f64>,
    band: Vec<Complex64>,
}

impl FrameFeatures {
    fn new(frame: &[Complex64], layout: &BandLayout) -> Self {
        let env = layout
            .groups
            .iter()
            .map(|&(a, b)| frame[a..b].iter().map(|c| c.norm()).sum())
            .collect();
        Self {
            env,
            band: frame[layout.lo..layout.phat_hi].to_vec(),
        }
    }
}

/// Frames at consecutive absolute indices starting from `start`.
struct Window<'a> {
    start: usize,
    frames: Vec<&'a FrameFeatures>,
}

impl Window<'_> {
    fn get(&self, abs: isize) -> Option<&FrameFeatures> {
        if abs < self.start as isize {
            return None;
        }
        self.frames.get(abs as usize - self.start).copied()
    }
}

/// Sub-band averaged Pearson correlation between mic envelopes and
/// reference envelopes `lag` frames earlier, for every lag in `0..=max_lag`.
fn lag_correlations(mic: &Window, refs: &Window, max_lag: usize, min_pairs: usize) -> Vec<f64> {
    let bands = mic.frames.first().map_or(0, |f| f.env.len());
    (0..=max_lag)
        .map(|lag| {
            let pairs: Vec<(&FrameFeatures, &FrameFeatures)> = mic
                .frames
                .iter()
                .enumerate()
                .filter_map(|(i, m)| {
                    let t = (mic.start + i) as isize - lag as isize;
                    refs.get(t).map(|r| (*m, r))
                })
                .collect();
            if pairs.len() < min_pairs.max(3) {
                return 0.0;
            }
            let n = pairs.len() as f64;
            let mut total = 0.0;
            let mut used = 0usize;
            for b in 0..bands {
                let mm = pairs.iter().map(|(m, _)| m.env[b]).sum::<f64>() / n;
                let rm = pairs.iter().map(|(_, r)| r.env[b]).sum::<f64>() / n;
                let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
                for (m, r) in &pairs {
                    let (dx, dy) = (m.env[b] - mm, r.env[b] - rm);
                    sxy += dx * dy;
                    sxx += dx * dx;
                    syy += dy * dy;
                }
                if sxx > 0.0 && syy > 0.0 {
                    total += sxy / (sxx * syy).sqrt();
                    used += 1;
                }
            }
            if used == 0 {
                0.0
            } else {
                total / used as f64
            }
        })
        .collect()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Offset of the vertex of the parabola through three samples, in (-0.5, 0.5).
fn parabolic_offset(left: f64, centre: f64, right: f64) -> f64 {
    let denom = left - 2.0 * centre + right;
    if denom >= 0.0 {
        return 0.0;
    }
    (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
}

/// Noise standard deviations an early PHAT peak must clear.
const LEAD_SIGNIFICANCE: f64 = 6.0;

/// PHAT-weighted cross-spectrum of mic frames against reference frames
/// `lag` earlier, or `None` if no frame pair overlaps.
fn phat_cross(mic: &Window, refs: &Window, lag: usize, nb: usize) -> Option<Vec<Complex64>> {
    let mut cross = vec![Complex64::default(); nb];
    for (i, m) in mic.frames.iter().enumerate() {
        let t = (mic.start + i) as isize - lag as isize;
        if let Some(r) = refs.get(t) {
            for ((c, a), b) in cross.iter_mut().zip(&m.band).zip(&r.band) {
                *c += a * b.conj();
            }
        }
    }
    for c in cross.iter_mut() {
        let n = c.norm();
        *c = if n > 0.0 { *c / n } else { Complex64::default() };
    }
    cross.iter().any(|c| c.norm() > 0.0).then_some(cross)
}

/// Sample-resolution delay from the PHAT score over frame lags
/// `lag − lead ..= lag + 1`. Each frame lag owns the residual delays within
/// half a hop of it, where its frames overlap the echo best. Lags more than one
/// frame before `lag` win only with a score well above what incoherent
/// bins reach: each PHAT bin is a unit phasor, so noise scores have
/// standard deviation `sqrt(nb / 2)`.
fn refine_delay(
    mic: &Window,
    refs: &Window,
    lag: usize,
    max_lag: usize,
    lead: usize,
    layout: &BandLayout,
    stft: &StftConfig,
) -> Option<f64> {
    let nb = layout.phat_hi - layout.lo;
    let hop = stft.hop as isize;
    let half = hop / 2;
    let n = stft.fft_size as f64;
    // Per-bin phase step for one sample of residual delay.
    let steps: Vec<Complex64> = (0..nb)
        .map(|j| Complex64::from_polar(1.0, 2.0 * PI * (layout.lo + j) as f64 / n))
        .collect();
    let floor = LEAD_SIGNIFICANCE * (nb as f64 / 2.0).sqrt();
    let mut best: Option<(f64, f64)> = None;
    let mut early: Option<(f64, f64)> = None;
    for l in lag.saturating_sub(lead)..=(lag + 1).min(max_lag) {
        let Some(cross) = phat_cross(mic, refs, l, nb) else {
            continue;
        };
        let mut rot: Vec<Complex64> = steps
            .iter()
            .zip(&cross)
            .map(|(st, c)| c * st.powi(-(half as i32)))
            .collect();
        let mut scores = Vec::with_capacity(stft.hop);
        for _ in -half..half {
            scores.push(rot.iter().map(|c| c.re).sum::<f64>());
            for (r, st) in rot.iter_mut().zip(&steps) {
                *r *= st;
            }
        }
        let k = argmax(&scores);
        let frac = if k > 0 && k + 1 < scores.len() {
            parabolic_offset(scores[k - 1], scores[k], scores[k + 1])
        } else {
            0.0
        };
        let d = (l as isize * hop + k as isize - half) as f64 + frac;
        let slot = if l + 1 < lag { &mut early } else { &mut best };
        if slot.is_none_or(|(s, _)| scores[k] > s) {
            *slot = Some((scores[k], d));
        }
    }
    match (early, best) {
        (Some((se, de)), Some((sb, _))) if se > floor && se > sb => Some(de),
        (Some((se, de)), None) if se > floor => Some(de),
        (_, b) => b.map(|(_, d)| d),
    }
}

/// Delay in samples for a correlation curve and the frames it came from.
fn resolve_delay(
    corr: &[f64],
    mic: &Window,
    refs: &Window,
    cfg: &TdeConfig,
    layout: &BandLayout,
    stft: &StftConfig,
) -> (f64, f64) {
    let lag = argmax(corr);
    let confidence = corr[lag].clamp(0.0, 1.0);
    let hop = stft.hop as f64;
    let delay = if cfg.fine_search {
        let lead = cfg.lead_search.div_ceil(stft.hop);
        refine_delay(mic, refs, lag, corr.len() - 1, lead, layout, stft).unwrap_or(lag as f64 * hop)
    } else {
        let frac = if lag > 0 && lag + 1 < corr.len() {
            parabolic_offset(corr[lag - 1], corr[lag], corr[lag + 1])
        } else {
            0.0
        };
        (lag as f64 + frac) * hop
    };
    (delay.clamp(0.0, cfg.max_delay as f64), confidence)
}

/// Whole-signal delay estimate. Both signals must hold at least one second.
pub fn estimate_delay(mic: &AudioBuffer, reference: &AudioBuffer, cfg: &TdeConfig) -> Result<DelayEstimate> {
    cfg.validate()?;
    let stft_cfg = StftConfig::default();
    mic.expect_rate(stft_cfg.sample_rate)?;
    reference.expect_rate(stft_cfg.sample_rate)?;
    let min_len = stft_cfg.sample_rate as usize;
    if mic.len() < min_len || reference.len() < min_len {
        return Err(Error::InsufficientData(format!(
            "delay estimation needs at least {min_len} samples per signal (mic {}, ref {})",
            mic.len(),
            reference.len()
        )));
    }
    let layout = BandLayout::new(cfg, &stft_cfg)?;
    let mic_spec = stft(mic, &stft_cfg)?;
    let ref_spec = stft(reference, &stft_cfg)?;
    let mic_f: Vec<_> = (0..mic_spec.frames)
        .map(|t| FrameFeatures::new(mic_spec.frame(t), &layout))
        .collect();
    let ref_f: Vec<_> = (0..ref_spec.frames)
        .map(|t| FrameFeatures::new(ref_spec.frame(t), &layout))
        .collect();
    let mic_w = Window {
        start: 0,
        frames: mic_f.iter().collect(),
    };
    let ref_w = Window {
        start: 0,
        frames: ref_f.iter().collect(),
    };
    let max_lag = cfg.max_delay / stft_cfg.hop;
    let corr = lag_correlations(&mic_w, &ref_w, max_lag, mic_f.len() / 4);
    let (delay, confidence) = resolve_delay(&corr, &mic_w, &ref_w, cfg, &layout, &stft_cfg);
    Ok(DelayEstimate {
        delay: delay.round() as usize,
        confidence,
    })
}

/// `out[n] = reference[n − delay]`, zero-filled, `len` samples long.
pub fn align(reference: &AudioBuffer, estimate: &DelayEstimate, len: usize) -> AudioBuffer {
    let d = estimate.delay;
    let samples = (0..len)
        .map(|n| {
            if n >= d {
                reference.samples.get(n - d).copied().unwrap_or(0.0)
            } else {
                0.0
            }
        })
        .collect();
    AudioBuffer::new(reference.sample_rate, samples)
}

/// Streaming delay estimator fed one STFT frame pair per hop.
#[derive(Debug, Clone)]
pub struct DelayTracker {
    cfg: TdeConfig,
    stft: StftConfig,
    layout: BandLayout,
    max_lag: usize,
    mic: VecDeque<FrameFeatures>,
    refs: VecDeque<FrameFeatures>,
    frames: usize,
    /// Smoothed (delay, confidence) track.
    smoothed: Option<(f64, f64)>,
    recent: VecDeque<f64>,
    current: Option<DelayEstimate>,
}

impl DelayTracker {
    pub fn new(cfg: TdeConfig, stft: StftConfig) -> Result<Self> {
        cfg.validate()?;
        stft.validate()?;
        let layout = BandLayout::new(&cfg, &stft)?;
        Ok(Self {
            max_lag: cfg.max_delay / stft.hop,
            cfg,
            stft,
            layout,
            mic: VecDeque::new(),
            refs: VecDeque::new(),
            frames: 0,
            smoothed: None,
            recent: VecDeque::new(),
            current: None,
        })
    }

    pub fn config(&self) -> &TdeConfig {
        &self.cfg
    }

    /// Latest estimate, `None` until the first block completes.
    pub fn current(&self) -> Option<DelayEstimate> {
        self.current
    }

    pub fn frames_seen(&self) -> usize {
        self.frames
    }

    /// Feeds one frame of the microphone and the unaligned reference.
    /// Returns the new estimate when a block boundary is crossed.
    pub fn push(&mut self, mic: &[Complex64], reference: &[Complex64]) -> Option<DelayEstimate> {
        self.mic.push_back(FrameFeatures::new(mic, &self.layout));
        self.refs.push_back(FrameFeatures::new(reference, &self.layout));
        self.frames += 1;
        while self.mic.len() > self.cfg.block {
            self.mic.pop_front();
        }
        while self.refs.len() > self.cfg.block + self.max_lag {
            self.refs.pop_front();
        }
        if !self.frames.is_multiple_of(self.cfg.block) {
            return None;
        }

        let mic_w = Window {
            start: self.frames - self.mic.len(),
            frames: self.mic.iter().collect(),
        };
        let ref_w = Window {
            start: self.frames - self.refs.len(),
            frames: self.refs.iter().collect(),
        };
        let corr = lag_correlations(&mic_w, &ref_w, self.max_lag, self.cfg.block / 4);
        let (delay, confidence) = resolve_delay(&corr, &mic_w, &ref_w, &self.cfg, &self.layout, &self.stft);

        self.recent.push_back(delay);
        while self.recent.len() > self.cfg.median_len {
            self.recent.pop_front();
        }
        let mut sorted: Vec<f64> = self.recent.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[(sorted.len() - 1) / 2];
        let a = self.cfg.smoothing;
        let (delay, confidence) = match self.smoothed {
            None => (median, confidence),
            Some((d, c)) => (a * d + (1.0 - a) * median, a * c + (1.0 - a) * confidence),
        };
        self.smoothed = Some((delay, confidence));
        let est = DelayEstimate {
            delay: (delay.round() as usize).min(self.cfg.max_delay),
            confidence,
        };
        self.current = Some(est);
        Some(est)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::SAMPLE_RATE;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, len: usize) -> AudioBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioBuffer::new(SAMPLE_RATE, (0..len).map(|_| rng.random_range(-0.5..0.5)).collect())
    }

    #[test]
    fn identical_signals_have_zero_delay() {
        let x = noise(1, 96_000);
        let est = estimate_delay(&x, &x, &TdeConfig::default()).unwrap();
        assert_eq!(est.delay, 0);
        assert!(est.confidence > 0.999);
    }

    #[test]
    fn short_signals_are_rejected() {
        let x = noise(1, 40_000);
        assert!(matches!(
            estimate_delay(&x, &x, &TdeConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn pure_delay_is_sample_accurate() {
        let x = noise(2, 144_000);
        for d in [0usize, 37, 480, 4_800, 12_345, 23_999] {
            let mic = x.delayed(d);
            let est = estimate_delay(&mic, &x, &TdeConfig::default()).unwrap();
            assert!((est.delay as i64 - d as i64).abs() <= 1, "{d} -> {}", est.delay);
        }
    }

    #[test]
    fn parabolic_only_mode_is_within_a_hop() {
        let x = noise(3, 144_000);
        let cfg = TdeConfig {
            fine_search: false,
            ..Default::default()
        };
        let est = estimate_delay(&x.delayed(7_000), &x, &cfg).unwrap();
        assert!((est.delay as i64 - 7_000).abs() <= 480);
    }

    #[test]
    fn align_shifts_with_zero_fill() {
        let x = AudioBuffer::new(SAMPLE_RATE, (1..=1000).map(f64::from).collect());
        let same = align(
            &x,
            &DelayEstimate {
                delay: 0,
                confidence: 1.0,
            },
            1000,
        );
        assert_eq!(same, x);
        let shifted = align(
            &x,
            &DelayEstimate {
                delay: 480,
                confidence: 1.0,
            },
            1000,
        );
        assert!(shifted.samples[..480].iter().all(|&s| s == 0.0));
        assert_eq!(&shifted.samples[480..], &x.samples[..520]);
    }

    #[test]
    fn amplitude_invariance() {
        let x = noise(4, 120_000);
        let mic = x.delayed(3_333);
        let cfg = TdeConfig::default();
        let a = estimate_delay(&mic, &x, &cfg).unwrap();
        for g in [1e-3, 0.37, 8.0] {
            let b = estimate_delay(&mic, &x.scaled(g), &cfg).unwrap();
            assert_eq!(a.delay, b.delay);
        }
    }

    #[test]
    fn tracker_reports_on_block_boundaries() {
        let cfg = TdeConfig::default();
        let stft_cfg = StftConfig::default();
        let x = noise(5, 48_000 * 3);
        let mic = x.delayed(2_400);
        let ms = stft(&mic, &stft_cfg).unwrap();
        let rs = stft(&x, &stft_cfg).unwrap();
        let mut tr = DelayTracker::new(cfg, stft_cfg).unwrap();
        let mut updates = 0;
        for t in 0..ms.frames {
            if let Some(est) = tr.push(ms.frame(t), rs.frame(t)) {
                updates += 1;
                assert_eq!((t + 1) % cfg.block, 0);
                assert!((est.delay as i64 - 2_400).abs() <= 1);
            }
        }
        assert_eq!(updates, ms.frames / cfg.block);
    }

    #[test]
    fn config_validation() {
        assert!(TdeConfig {
            smoothing: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TdeConfig {
            max_delay: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TdeConfig {
            num_subbands: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}

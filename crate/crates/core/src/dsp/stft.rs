use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Periodic square-root Hann, used for both analysis and synthesis.
    SqrtHann,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 20 ms window, 10 ms hop, 960-point FFT at 48 kHz.
    fn default() -> Self {
        Self {
            sample_rate: SAMPLE_RATE,
            win_len: 960,
            hop: 480,
            fft_size: 960,
            window: WindowKind::SqrtHann,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.win_len == 0 || self.hop == 0 {
            return Err(Error::Config("window and hop must be non-zero".into()));
        }
        if self.win_len != self.fft_size {
            return Err(Error::Config(format!(
                "win_len ({}) must equal fft_size ({})",
                self.win_len, self.fft_size
            )));
        }
        if !self.win_len.is_multiple_of(self.hop) {
            return Err(Error::Config(format!(
                "hop ({}) must divide win_len ({})",
                self.hop, self.win_len
            )));
        }
        // sqrt-Hann pairs only sum to one at 50 % overlap.
        if self.window == WindowKind::SqrtHann && self.win_len != 2 * self.hop {
            return Err(Error::Config("square-root Hann requires hop == win_len / 2".into()));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Leading zeros inserted so that frames are causal.
    pub fn lead_pad(&self) -> usize {
        self.win_len - self.hop
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.fft_size as f64
    }

    pub fn window(&self) -> Vec<f64> {
        match self.window {
            WindowKind::SqrtHann => (0..self.win_len)
                .map(|n| {
                    let hann = 0.5 - 0.5 * (2.0 * PI * n as f64 / self.win_len as f64).cos();
                    hann.sqrt()
                })
                .collect(),
        }
    }
}

/// Windowed forward transform of one frame of `win_len` samples.
pub struct FrameAnalyzer {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
    bins: usize,
}

impl FrameAnalyzer {
    pub fn new(cfg: &StftConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Self {
            window: cfg.window(),
            buf: vec![Complex64::default(); cfg.fft_size],
            scratch,
            fft,
            bins: cfg.bins(),
        }
    }

    pub fn analyze(&mut self, frame: &[f64], out: &mut [Complex64]) {
        debug_assert_eq!(frame.len(), self.window.len());
        for ((b, &x), &w) in self.buf.iter_mut().zip(frame).zip(&self.window) {
            *b = Complex64::new(x * w, 0.0);
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        out.copy_from_slice(&self.buf[..self.bins]);
    }
}

/// Inverse transform plus synthesis window for one frame.
pub struct FrameSynthesizer {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl FrameSynthesizer {
    pub fn new(cfg: &StftConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_inverse(cfg.fft_size);
        let scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        Self {
            window: cfg.window(),
            buf: vec![Complex64::default(); cfg.fft_size],
            scratch,
            fft,
        }
    }

    /// Writes the windowed time-domain frame into `out`. Imaginary parts of
    /// the DC and Nyquist bins are ignored, as in a real inverse FFT.
    pub fn synthesize(&mut self, spectrum: &[Complex64], out: &mut [f64]) {
        let n = self.buf.len();
        let bins = spectrum.len();
        self.buf[..bins].copy_from_slice(spectrum);
        for k in bins..n {
            self.buf[k] = spectrum[n - k].conj();
        }
        self.fft.process_with_scratch(&mut self.buf, &mut self.scratch);
        let scale = 1.0 / n as f64;
        for ((o, b), &w) in out.iter_mut().zip(&self.buf).zip(&self.window) {
            *o = b.re * scale * w;
        }
    }
}

/// Causal STFT: `win_len - hop` leading zeros, trailing zeros to complete
/// the last frame, `ceil(len / hop)` frames.
pub fn stft(signal: &AudioBuffer, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    signal.expect_rate(cfg.sample_rate)?;
    if signal.is_empty() {
        return Err(Error::Contract("stft needs at least one sample".into()));
    }
    let frames = cfg.frame_count(signal.len());
    let mut padded = vec![0.0; (frames - 1) * cfg.hop + cfg.win_len];
    let lead = cfg.lead_pad();
    padded[lead..lead + signal.len()].copy_from_slice(&signal.samples);

    let mut analyzer = FrameAnalyzer::new(cfg);
    let mut spec = Spectrogram::zeros(frames, cfg.bins());
    for t in 0..frames {
        let start = t * cfg.hop;
        analyzer.analyze(&padded[start..start + cfg.win_len], spec.frame_mut(t));
    }
    Ok(spec)
}

/// Overlap-add resynthesis. Returns `frames * hop` samples aligned with the
/// original signal (the leading pad is removed).
pub fn istft(spec: &Spectrogram, cfg: &StftConfig) -> Result<AudioBuffer> {
    cfg.validate()?;
    if spec.compression != 1.0 {
        return Err(Error::Contract(format!(
            "istft needs an uncompressed spectrogram (exponent {})",
            spec.compression
        )));
    }
    if spec.bins != cfg.bins() {
        return Err(Error::Contract(format!(
            "istft expects {} bins, got {}",
            cfg.bins(),
            spec.bins
        )));
    }
    let frames = spec.frames;
    let mut padded = vec![0.0; frames.saturating_sub(1) * cfg.hop + cfg.win_len];
    let mut synth = FrameSynthesizer::new(cfg);
    let mut buf = vec![0.0; cfg.win_len];
    for t in 0..frames {
        synth.synthesize(spec.frame(t), &mut buf);
        let start = t * cfg.hop;
        for (p, b) in padded[start..start + cfg.win_len].iter_mut().zip(&buf) {
            *p += b;
        }
    }
    let lead = cfg.lead_pad();
    Ok(AudioBuffer::new(
        cfg.sample_rate,
        padded[lead..lead + frames * cfg.hop].to_vec(),
    ))
}

//! Time-frequency representation shared by every other stage: causal
//! STFT/iSTFT, power-law compression, the wide-band/high-band split and
//! real/imaginary channel stacking.

mod stft;

pub use stft::{istft, stft, FrameAnalyzer, FrameSynthesizer, StftConfig, WindowKind};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Complex time-frequency matrix, frames × bins, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<Complex64>,
    /// 1.0 for a linear spectrogram, otherwise the magnitude exponent applied.
    pub compression: f64,
}

impl Spectrogram {
    pub fn zeros(frames: usize, bins: usize) -> Self {
        Self {
            frames,
            bins,
            data: vec![Complex64::default(); frames * bins],
            compression: 1.0,
        }
    }

    pub fn from_frames(frames: &[Vec<Complex64>], compression: f64) -> Result<Self> {
        let bins = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != bins) {
            return Err(Error::Contract("ragged frames".into()));
        }
        Ok(Self {
            frames: frames.len(),
            bins,
            data: frames.concat(),
            compression,
        })
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn get(&self, t: usize, k: usize) -> Complex64 {
        self.data[t * self.bins + k]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    fn same_shape(&self, other: &Spectrogram) -> bool {
        self.frames == other.frames && self.bins == other.bins
    }
}

/// `c ↦ |c|^p · e^{j·arg c}`, with zero mapped to zero.
#[inline]
pub fn compress_value(c: Complex64, p: f64) -> Complex64 {
    let mag = c.norm();
    if mag == 0.0 {
        Complex64::default()
    } else {
        c * mag.powf(p - 1.0)
    }
}

pub fn compress(spec: &Spectrogram, p: f64) -> Result<Spectrogram> {
    if spec.compression != 1.0 {
        return Err(Error::Contract(format!(
            "spectrogram already compressed (exponent {})",
            spec.compression
        )));
    }
    if !(p > 0.0) {
        return Err(Error::Config(format!("compression exponent must be positive, got {p}")));
    }
    Ok(Spectrogram {
        frames: spec.frames,
        bins: spec.bins,
        data: spec.data.iter().map(|&c| compress_value(c, p)).collect(),
        compression: p,
    })
}

/// Exact inverse of [`compress`].
pub fn decompress(spec: &Spectrogram) -> Spectrogram {
    let inv = 1.0 / spec.compression;
    Spectrogram {
        frames: spec.frames,
        bins: spec.bins,
        data: spec.data.iter().map(|&c| compress_value(c, inv)).collect(),
        compression: 1.0,
    }
}

/// Partition of the 481 full-band bins. The 16 kHz bin belongs to the wide band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandSplitSpec {
    /// First high-band bin; wide band is `[0, split)`.
    pub split: usize,
    pub total: usize,
}

impl Default for BandSplitSpec {
    fn default() -> Self {
        Self { split: 321, total: 481 }
    }
}

impl BandSplitSpec {
    pub fn wb_bins(&self) -> usize {
        self.split
    }

    pub fn hb_bins(&self) -> usize {
        self.total - self.split
    }
}

pub fn band_split(spec: &Spectrogram, bs: &BandSplitSpec) -> Result<(Spectrogram, Spectrogram)> {
    if spec.bins != bs.total {
        return Err(Error::Contract(format!(
            "band split expects {} bins, got {}",
            bs.total, spec.bins
        )));
    }
    let mut wb = Spectrogram::zeros(spec.frames, bs.wb_bins());
    let mut hb = Spectrogram::zeros(spec.frames, bs.hb_bins());
    wb.compression = spec.compression;
    hb.compression = spec.compression;
    for t in 0..spec.frames {
        let f = spec.frame(t);
        wb.frame_mut(t).copy_from_slice(&f[..bs.split]);
        hb.frame_mut(t).copy_from_slice(&f[bs.split..]);
    }
    Ok((wb, hb))
}

pub fn band_merge(wb: &Spectrogram, hb: &Spectrogram) -> Result<Spectrogram> {
    if wb.frames != hb.frames || wb.compression != hb.compression {
        return Err(Error::Contract(
            "band merge needs matching frames and compression".into(),
        ));
    }
    let bins = wb.bins + hb.bins;
    let mut out = Spectrogram::zeros(wb.frames, bins);
    out.compression = wb.compression;
    for t in 0..wb.frames {
        let f = out.frame_mut(t);
        f[..wb.bins].copy_from_slice(wb.frame(t));
        f[wb.bins..].copy_from_slice(hb.frame(t));
    }
    Ok(out)
}

/// Real-valued channels × frames × bins tensor of stacked re/im parts.
#[derive(Debug, Clone, PartialEq)]
pub struct BandStack {
    pub channels: usize,
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f64>,
    pub compression: f64,
}

impl BandStack {
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.frames * self.bins;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, t: usize, f: usize) -> f64 {
        self.data[(c * self.frames + t) * self.bins + f]
    }
}

/// Stacks spectrograms as `[re(s1), im(s1), re(s2), im(s2), …]`.
pub fn stack_reim(specs: &[&Spectrogram]) -> Result<BandStack> {
    let first = specs
        .first()
        .ok_or_else(|| Error::Contract("stack_reim needs at least one spectrogram".into()))?;
    if specs
        .iter()
        .any(|s| !s.same_shape(first) || s.compression != first.compression)
    {
        return Err(Error::Contract(
            "stacked spectrograms must share shape and compression".into(),
        ));
    }
    let mut data = Vec::with_capacity(2 * specs.len() * first.data.len());
    for s in specs {
        data.extend(s.data.iter().map(|c| c.re));
        data.extend(s.data.iter().map(|c| c.im));
    }
    Ok(BandStack {
        channels: 2 * specs.len(),
        frames: first.frames,
        bins: first.bins,
        data,
        compression: first.compression,
    })
}

pub fn unstack_reim(stack: &BandStack) -> Result<Vec<Spectrogram>> {
    if !stack.channels.is_multiple_of(2) {
        return Err(Error::Contract("odd channel count cannot be unstacked".into()));
    }
    Ok((0..stack.channels / 2)
        .map(|i| {
            let re = stack.channel(2 * i);
            let im = stack.channel(2 * i + 1);
            Spectrogram {
                frames: stack.frames,
                bins: stack.bins,
                data: re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect(),
                compression: stack.compression,
            }
        })
        .collect())
}

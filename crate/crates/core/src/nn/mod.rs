//! Small deterministic f32 inference runtime for the post-filter graphs.
//!
//! Every layer is evaluated one frame at a time against explicit streaming
//! state ([`Layer::step`]). Whole-sequence evaluation ([`run`],
//! [`forward_tensor`]) is just that loop over a fresh state, so batch and
//! streaming results agree bit for bit and causality holds by construction.
//!
//! Frames are channel-last: `data[bin * channels + c]`.

pub mod conv;
pub mod manifest;
pub mod norm;
pub mod params;
pub mod rnn;
pub mod unet;

pub use conv::{Conv2d, ConvSpec, Gated, TrConv2d};
pub use manifest::{ManifestMetadata, ManifestSource, Recorder, WeightManifest, MANIFEST_MAGIC, MANIFEST_VERSION};
pub use norm::{BatchNorm, Dropout, Elu, PRelu, Sigmoid, Tanh};
pub use params::{Binder, FnSource, Init, LayerInfo, ParamSource, ParamSpec, SeedSource};
pub use rnn::{FtLstm, Gru, Linear, Lstm};
pub use unet::UNetBlock;

use crate::error::{Error, Result};
use wide::f32x8;

/// One time step of a `[bins × channels]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub bins: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn zeros(bins: usize, channels: usize) -> Self {
        Self {
            bins,
            channels,
            data: vec![0.0; bins * channels],
        }
    }

    pub fn new(bins: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != bins * channels {
            return Err(Error::Contract(format!(
                "frame data has {} values, shape {bins}x{channels} needs {}",
                data.len(),
                bins * channels
            )));
        }
        Ok(Self { bins, channels, data })
    }

    /// A feature vector, seen as a single-bin frame.
    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            bins: 1,
            channels: data.len(),
            data,
        }
    }

    #[inline]
    pub fn at(&self, bin: usize) -> &[f32] {
        &self.data[bin * self.channels..(bin + 1) * self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, bin: usize) -> &mut [f32] {
        &mut self.data[bin * self.channels..(bin + 1) * self.channels]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.bins, self.channels)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Frame) -> Result<()> {
        expect_shape(other, self.bins, self.channels, "residual add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

pub(crate) fn expect_shape(x: &Frame, bins: usize, channels: usize, what: &str) -> Result<()> {
    if x.bins != bins || x.channels != channels {
        return Err(Error::Contract(format!(
            "{what}: expected {bins}x{channels} frame, got {}x{}",
            x.bins, x.channels
        )));
    }
    Ok(())
}

/// Dense `[channels, frames, bins]` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Contract(format!(
                "tensor shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Splits a `[C, T, F]` tensor into `T` channel-last frames.
    pub fn to_frames(&self) -> Result<Vec<Frame>> {
        let [c, t, f] = self.shape[..] else {
            return Err(Error::Contract(format!(
                "expected a [C, T, F] tensor, got shape {:?}",
                self.shape
            )));
        };
        Ok((0..t)
            .map(|ti| {
                let mut fr = Frame::zeros(f, c);
                for ci in 0..c {
                    for fi in 0..f {
                        fr.data[fi * c + ci] = self.data[(ci * t + ti) * f + fi];
                    }
                }
                fr
            })
            .collect())
    }

    pub fn from_frames(frames: &[Frame]) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::Contract("no frames to stack".into()));
        };
        let (f, c, t) = (first.bins, first.channels, frames.len());
        let mut data = vec![0.0; c * t * f];
        for (ti, fr) in frames.iter().enumerate() {
            expect_shape(fr, f, c, "tensor stacking")?;
            for fi in 0..f {
                for ci in 0..c {
                    data[(ci * t + ti) * f + fi] = fr.data[fi * c + ci];
                }
            }
        }
        Ok(Self {
            shape: vec![c, t, f],
            data,
        })
    }
}

/// A frame-synchronous layer with explicit streaming state.
pub trait Layer: Send + Sync {
    type State: Clone + Send;

    fn init_state(&self) -> Self::State;

    fn step(&self, state: &mut Self::State, x: &Frame) -> Result<Frame>;
}

/// Whole-sequence evaluation from a fresh state.
pub fn run<L: Layer>(layer: &L, frames: &[Frame]) -> Result<Vec<Frame>> {
    let mut st = layer.init_state();
    frames.iter().map(|x| layer.step(&mut st, x)).collect()
}

pub fn forward_tensor<L: Layer>(layer: &L, x: &Tensor) -> Result<Tensor> {
    Tensor::from_frames(&run(layer, &x.to_frames()?)?)
}

/// Dot product with eight interleaved partial sums combined in a fixed
/// order, so every call on the same data gives the same bits.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let full = n / 8 * 8;
    let mut acc = f32x8::ZERO;
    for i in (0..full).step_by(8) {
        acc += load(&a[i..]) * load(&b[i..]);
    }
    let mut tail = 0.0f32;
    for j in full..n {
        tail += a[j] * b[j];
    }
    reduce(acc, tail)
}

#[inline(always)]
fn load(x: &[f32]) -> f32x8 {
    let v: [f32; 8] = x[..8].try_into().unwrap();
    f32x8::from(v)
}

#[inline(always)]
fn reduce(acc: f32x8, tail: f32) -> f32 {
    let s = acc.to_array();
    ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7])) + tail
}

/// Four dot products sharing `w`, each bit-identical to [`dot`].
#[inline]
pub fn dot4(w: &[f32], a: &[f32], b: &[f32], c: &[f32], d: &[f32]) -> [f32; 4] {
    let n = w.len();
    assert!(a.len() >= n && b.len() >= n && c.len() >= n && d.len() >= n);
    let full = n / 8 * 8;
    let mut acc = [f32x8::ZERO; 4];
    for i in (0..full).step_by(8) {
        let wv = load(&w[i..]);
        acc[0] += wv * load(&a[i..]);
        acc[1] += wv * load(&b[i..]);
        acc[2] += wv * load(&c[i..]);
        acc[3] += wv * load(&d[i..]);
    }
    let mut out = [0.0f32; 4];
    for ((o, x), s) in out.iter_mut().zip([a, b, c, d]).zip(acc) {
        let mut tail = 0.0f32;
        for j in full..n {
            tail += w[j] * x[j];
        }
        *o = reduce(s, tail);
    }
    out
}

/// `out[r] = bias[r] + dot(w[r], x)` for a row-major `[rows][x.len()]`
/// matrix, four rows per pass over `x`.
pub fn matvec(w: &[f32], bias: &[f32], x: &[f32], out: &mut [f32]) {
    let n = x.len();
    debug_assert_eq!(w.len(), out.len() * n);
    let mut rows = out.chunks_exact_mut(4);
    let mut r = 0;
    for o in &mut rows {
        let base = r * n;
        let v = dot4(
            x,
            &w[base..base + n],
            &w[base + n..base + 2 * n],
            &w[base + 2 * n..base + 3 * n],
            &w[base + 3 * n..base + 4 * n],
        );
        for k in 0..4 {
            o[k] = bias[r + k] + v[k];
        }
        r += 4;
    }
    for o in rows.into_remainder() {
        *o = bias[r] + dot(&w[r * n..(r + 1) * n], x);
        r += 1;
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Debug validation: every layer output must be finite.
pub(crate) fn check_finite(x: &Frame, what: &str) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

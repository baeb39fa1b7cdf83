//! Causal 2-D convolutions over (time, frequency).
//!
//! Kernel tap `kt = kt_len - 1` reads the current frame and smaller taps
//! reach back one frame each, so no layer looks ahead. Weights arrive in
//! PyTorch layout (`[Cout, Cin, kT, kF]` for Conv2d, `[Cin, Cout, kT, kF]`
//! for ConvTranspose2d) and are repacked to `[Cout][kT][kF][Cin]` so every
//! inner product runs over contiguous channels.
//!
//! The transposed convolution uses the same frequency index relation as the
//! forward one (`f_in = stride * f_out + kf - pad`), so it is the exact
//! adjoint in frequency. In time it is causal too, which makes it the
//! adjoint of the convolution under time reversal.

use std::collections::VecDeque;

use serde::Serialize;
use serde_json::json;

use super::params::{Binder, Init};
use super::{dot, dot4, expect_shape, sigmoid, Frame, Layer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kt: usize,
    pub kf: usize,
    pub stride_f: usize,
    pub pad_f: usize,
}

impl ConvSpec {
    /// Kernel (2, 3), stride (1, 2), one bin of frequency padding.
    pub fn standard(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kt: 2,
            kf: 3,
            stride_f: 2,
            pad_f: 1,
        }
    }

    /// Kernel (2, 3) with unit stride: frequency size preserved.
    pub fn same(cin: usize, cout: usize) -> Self {
        Self {
            stride_f: 1,
            ..Self::standard(cin, cout)
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self {
            cin,
            cout,
            kt: 1,
            kf: 1,
            stride_f: 1,
            pad_f: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.cin == 0 || self.cout == 0 || self.kt == 0 || self.kf == 0 || self.stride_f == 0 {
            return Err(Error::Config(format!("degenerate convolution {self:?}")));
        }
        Ok(())
    }

    /// `floor((F + 2 pad - kF) / stride) + 1`.
    pub fn conv_out_bins(&self, in_bins: usize) -> Result<usize> {
        let padded = in_bins + 2 * self.pad_f;
        if in_bins == 0 || padded < self.kf {
            return Err(Error::Config(format!(
                "{in_bins} bins too few for kernel width {}",
                self.kf
            )));
        }
        Ok((padded - self.kf) / self.stride_f + 1)
    }

    /// `(F - 1) stride - 2 pad + kF`, before any output padding.
    pub fn tconv_out_bins(&self, in_bins: usize) -> usize {
        ((in_bins.max(1) - 1) * self.stride_f + self.kf).saturating_sub(2 * self.pad_f)
    }

    pub fn numel(&self) -> usize {
        self.cin * self.cout * self.kt * self.kf
    }
}

/// Output bins sharing one set of valid frequency taps, with the matching
/// weights packed as `[cout][kt][tap][cin]` so each output value is a
/// single contiguous dot product against a gathered input patch.
#[derive(Debug, Clone)]
struct TapGroup {
    kfs: Vec<usize>,
    w: Vec<f32>,
    /// Output bins using this group.
    bins: Vec<usize>,
}

/// Shared evaluation kernel for both convolution directions.
#[derive(Debug, Clone)]
struct ConvCore {
    spec: ConvSpec,
    in_bins: usize,
    out_bins: usize,
    bias: Vec<f32>,
    groups: Vec<TapGroup>,
    /// Per output bin: tap group and the input bin of each of its taps.
    taps: Vec<(usize, Vec<usize>)>,
}

impl ConvCore {
    /// `w` is `[cout][kt][kf][cin]`; `taps[fo]` lists `(kf, input bin)`.
    fn new(spec: ConvSpec, in_bins: usize, w: Vec<f32>, bias: Vec<f32>, taps: Vec<Vec<(usize, usize)>>) -> Self {
        let mut groups: Vec<TapGroup> = Vec::new();
        let mut out_taps = Vec::with_capacity(taps.len());
        for t in &taps {
            let kfs: Vec<usize> = t.iter().map(|(kf, _)| *kf).collect();
            let g = match groups.iter().position(|g| g.kfs == kfs) {
                Some(g) => g,
                None => {
                    let mut packed = Vec::with_capacity(spec.cout * spec.kt * kfs.len() * spec.cin);
                    for co in 0..spec.cout {
                        for kt in 0..spec.kt {
                            for &kf in &kfs {
                                let off = ((co * spec.kt + kt) * spec.kf + kf) * spec.cin;
                                packed.extend_from_slice(&w[off..off + spec.cin]);
                            }
                        }
                    }
                    groups.push(TapGroup {
                        kfs,
                        w: packed,
                        bins: Vec::new(),
                    });
                    groups.len() - 1
                }
            };
            groups[g].bins.push(out_taps.len());
            out_taps.push((g, t.iter().map(|(_, fi)| *fi).collect()));
        }
        Self {
            spec,
            in_bins,
            out_bins: taps.len(),
            bias,
            groups,
            taps: out_taps,
        }
    }

    fn apply(&self, hist: &VecDeque<Frame>, x: &Frame) -> Frame {
        let s = &self.spec;
        let mut out = Frame::zeros(self.out_bins, s.cout);
        let mut patch = Vec::with_capacity(4 * s.kt * s.kf * s.cin);
        for g in &self.groups {
            let n = s.kt * g.kfs.len() * s.cin;
            // Four output bins per pass over the weights.
            for chunk in g.bins.chunks(4) {
                patch.clear();
                for &fo in chunk {
                    for kt in 0..s.kt {
                        let frame = if kt + 1 == s.kt { x } else { &hist[kt] };
                        for &fi in &self.taps[fo].1 {
                            patch.extend_from_slice(frame.at(fi));
                        }
                    }
                }
                for co in 0..s.cout {
                    let w = &g.w[co * n..(co + 1) * n];
                    if let [a, b, c, d] = chunk {
                        let r = dot4(w, &patch[..n], &patch[n..2 * n], &patch[2 * n..3 * n], &patch[3 * n..]);
                        for (fo, v) in [a, b, c, d].into_iter().zip(r) {
                            out.data[fo * s.cout + co] = self.bias[co] + v;
                        }
                    } else {
                        for (i, &fo) in chunk.iter().enumerate() {
                            out.data[fo * s.cout + co] = self.bias[co] + dot(w, &patch[i * n..(i + 1) * n]);
                        }
                    }
                }
            }
        }
        out
    }

    fn init_state(&self) -> VecDeque<Frame> {
        (0..self.spec.kt - 1)
            .map(|_| Frame::zeros(self.in_bins, self.spec.cin))
            .collect()
    }

    fn step(&self, hist: &mut VecDeque<Frame>, x: &Frame, what: &str) -> Result<Frame> {
        expect_shape(x, self.in_bins, self.spec.cin, what)?;
        let y = self.apply(hist, x);
        if self.spec.kt > 1 {
            hist.pop_front();
            hist.push_back(x.clone());
        }
        Ok(y)
    }
}

/// Causal Conv2d.
#[derive(Debug, Clone)]
pub struct Conv2d {
    core: ConvCore,
}

impl Conv2d {
    pub fn new(b: &mut Binder, name: &str, spec: ConvSpec, in_bins: usize) -> Result<Self> {
        spec.validate()?;
        let out_bins = spec.conv_out_bins(in_bins)?;
        let init = Init::fan_in(spec.cin * spec.kt * spec.kf);
        let weight = b.take(
            &format!("{name}.weight"),
            &[spec.cout, spec.cin, spec.kt, spec.kf],
            init,
        );
        let bias = b.take(&format!("{name}.bias"), &[spec.cout], init);
        b.layer(name, "Conv2d", json!(spec), (in_bins, spec.cin), (out_bins, spec.cout));
        Self::from_weights(spec, in_bins, &weight, bias)
    }

    /// `weight` in `[Cout, Cin, kT, kF]` layout.
    pub fn from_weights(spec: ConvSpec, in_bins: usize, weight: &[f32], bias: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if weight.len() != spec.numel() || bias.len() != spec.cout {
            return Err(Error::Contract("conv2d weight or bias size mismatch".into()));
        }
        let out_bins = spec.conv_out_bins(in_bins)?;
        let mut w = vec![0.0; spec.numel()];
        for co in 0..spec.cout {
            for ci in 0..spec.cin {
                for t in 0..spec.kt {
                    for f in 0..spec.kf {
                        w[((co * spec.kt + t) * spec.kf + f) * spec.cin + ci] =
                            weight[((co * spec.cin + ci) * spec.kt + t) * spec.kf + f];
                    }
                }
            }
        }
        let taps = (0..out_bins)
            .map(|fo| {
                (0..spec.kf)
                    .filter_map(|kf| {
                        let fi = (fo * spec.stride_f + kf) as isize - spec.pad_f as isize;
                        (fi >= 0 && (fi as usize) < in_bins).then_some((kf, fi as usize))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            core: ConvCore::new(spec, in_bins, w, bias, taps),
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.core.spec
    }

    pub fn out_bins(&self) -> usize {
        self.core.out_bins
    }
}

impl Layer for Conv2d {
    type State = VecDeque<Frame>;

    fn init_state(&self) -> Self::State {
        self.core.init_state()
    }

    fn step(&self, state: &mut Self::State, x: &Frame) -> Result<Frame> {
        self.core.step(state, x, "conv2d")
    }
}

/// Causal transposed Conv2d producing exactly `out_bins` frequency bins
/// (output padding or cropping as needed).
#[derive(Debug, Clone)]
pub struct TrConv2d {
    core: ConvCore,
}

impl TrConv2d {
    pub fn new(b: &mut Binder, name: &str, spec: ConvSpec, in_bins: usize, out_bins: usize) -> Result<Self> {
        spec.validate()?;
        let init = Init::fan_in(spec.cout * spec.kt * spec.kf);
        let weight = b.take(
            &format!("{name}.weight"),
            &[spec.cin, spec.cout, spec.kt, spec.kf],
            init,
        );
        let bias = b.take(&format!("{name}.bias"), &[spec.cout], init);
        b.layer(
            name,
            "TrConv2d",
            json!(spec),
            (in_bins, spec.cin),
            (out_bins, spec.cout),
        );
        Self::from_weights(spec, in_bins, out_bins, &weight, bias)
    }

    /// `weight` in `[Cin, Cout, kT, kF]` layout.
    pub fn from_weights(
        spec: ConvSpec,
        in_bins: usize,
        out_bins: usize,
        weight: &[f32],
        bias: Vec<f32>,
    ) -> Result<Self> {
        spec.validate()?;
        if weight.len() != spec.numel() || bias.len() != spec.cout {
            return Err(Error::Contract("trconv2d weight or bias size mismatch".into()));
        }
        if in_bins == 0 || out_bins == 0 || out_bins > spec.tconv_out_bins(in_bins) + spec.stride_f {
            return Err(Error::Config(format!(
                "transposed conv cannot map {in_bins} bins to {out_bins}"
            )));
        }
        let mut w = vec![0.0; spec.numel()];
        for ci in 0..spec.cin {
            for co in 0..spec.cout {
                for t in 0..spec.kt {
                    for f in 0..spec.kf {
                        w[((co * spec.kt + t) * spec.kf + f) * spec.cin + ci] =
                            weight[((ci * spec.cout + co) * spec.kt + t) * spec.kf + f];
                    }
                }
            }
        }
        let taps = (0..out_bins)
            .map(|fo| {
                (0..spec.kf)
                    .filter_map(|kf| {
                        let num = (fo + spec.pad_f) as isize - kf as isize;
                        if num < 0 || !(num as usize).is_multiple_of(spec.stride_f) {
                            return None;
                        }
                        let fi = num as usize / spec.stride_f;
                        (fi < in_bins).then_some((kf, fi))
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            core: ConvCore::new(spec, in_bins, w, bias, taps),
        })
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.core.spec
    }

    pub fn out_bins(&self) -> usize {
        self.core.out_bins
    }
}

impl Layer for TrConv2d {
    type State = VecDeque<Frame>;

    fn init_state(&self) -> Self::State {
        self.core.init_state()
    }

    fn step(&self, state: &mut Self::State, x: &Frame) -> Result<Frame> {
        self.core.step(state, x, "trconv2d")
    }
}

/// Gated wrapper: the inner layer yields `2C` channels, the first half is
/// the value path and the second half the gate, output `V * sigmoid(G)`.
#[derive(Debug, Clone)]
pub struct Gated<L> {
    pub inner: L,
}

impl<L: Layer> Gated<L> {
    pub fn new(inner: L, out_channels: usize) -> Result<Self> {
        if !out_channels.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "gated layer needs an even channel count, got {out_channels}"
            )));
        }
        Ok(Self { inner })
    }
}

pub(crate) fn gate(y: &Frame) -> Result<Frame> {
    if !y.channels.is_multiple_of(2) {
        return Err(Error::Contract(format!(
            "gated layer needs an even channel count, got {}",
            y.channels
        )));
    }
    let c = y.channels / 2;
    let mut out = Frame::zeros(y.bins, c);
    for f in 0..y.bins {
        let (src, dst) = (y.at(f), out.at_mut(f));
        for i in 0..c {
            dst[i] = src[i] * sigmoid(src[c + i]);
        }
    }
    Ok(out)
}

impl<L: Layer> Layer for Gated<L> {
    type State = L::State;

    fn init_state(&self) -> Self::State {
        self.inner.init_state()
    }

    fn step(&self, state: &mut Self::State, x: &Frame) -> Result<Frame> {
        gate(&self.inner.step(state, x)?)
    }
}

/// Gated Conv2d (`cout` is the gated output width; the kernel has `2 cout`).
pub fn gconv(b: &mut Binder, name: &str, spec: ConvSpec, in_bins: usize) -> Result<Gated<Conv2d>> {
    let inner = Conv2d::new(
        b,
        name,
        ConvSpec {
            cout: 2 * spec.cout,
            ..spec
        },
        in_bins,
    )?;
    Gated::new(inner, 2 * spec.cout)
}

pub fn gtrconv(b: &mut Binder, name: &str, spec: ConvSpec, in_bins: usize, out_bins: usize) -> Result<Gated<TrConv2d>> {
    let inner = TrConv2d::new(
        b,
        name,
        ConvSpec {
            cout: 2 * spec.cout,
            ..spec
        },
        in_bins,
        out_bins,
    )?;
    Gated::new(inner, 2 * spec.cout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::run;

    fn frames(t: usize, bins: usize, ch: usize, f: impl Fn(usize, usize, usize) -> f32) -> Vec<Frame> {
        (0..t)
            .map(|ti| {
                let mut fr = Frame::zeros(bins, ch);
                for b in 0..bins {
                    for c in 0..ch {
                        fr.at_mut(b)[c] = f(ti, b, c);
                    }
                }
                fr
            })
            .collect()
    }

    #[test]
    fn out_bin_laws() {
        let s = ConvSpec::standard(1, 1);
        let chain: Vec<usize> = std::iter::successors(Some(321), |&f| s.conv_out_bins(f).ok())
            .take(6)
            .collect();
        assert_eq!(chain, vec![321, 161, 81, 41, 21, 11]);
        for f in [11, 21, 41, 81, 161] {
            assert_eq!(s.tconv_out_bins(f), 2 * f - 1);
        }
        assert_eq!(s.conv_out_bins(160).unwrap(), 80);
        assert!(ConvSpec { kf: 5, pad_f: 0, ..s }.conv_out_bins(3).is_err());
    }

    #[test]
    fn pointwise_identity() {
        let spec = ConvSpec::pointwise(3, 3);
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let conv = Conv2d::from_weights(spec, 5, &w, vec![0.0; 3]).unwrap();
        let x = frames(4, 5, 3, |t, b, c| (t * 100 + b * 10 + c) as f32 - 50.0);
        assert_eq!(run(&conv, &x).unwrap(), x);
    }

    #[test]
    fn all_ones_kernel_interior_is_six() {
        let spec = ConvSpec::standard(1, 1);
        let conv = Conv2d::from_weights(spec, 9, &[1.0; 6], vec![0.0]).unwrap();
        let x = frames(3, 9, 1, |_, _, _| 1.0);
        let y = run(&conv, &x).unwrap();
        // frame 0 sees a zero past frame: 3 taps; interior afterwards: 6.
        assert_eq!(y[0].at(2)[0], 3.0);
        assert_eq!(y[1].at(2)[0], 6.0);
        // bin 0 reads padded bin -1.
        assert_eq!(y[1].at(0)[0], 4.0);
    }

    #[test]
    fn gate_halves_value_path_at_zero_gate() {
        let x = Frame::new(1, 4, vec![2.0, -4.0, 0.0, 0.0]).unwrap();
        assert_eq!(gate(&x).unwrap().data, vec![1.0, -2.0]);
        let x = Frame::new(1, 2, vec![3.0, 20.0]).unwrap();
        assert!((gate(&x).unwrap().data[0] - 3.0).abs() < 1e-6);
        assert!(gate(&Frame::zeros(1, 3)).is_err());
    }

    #[test]
    fn transposed_zero_input_gives_bias() {
        let spec = ConvSpec::standard(2, 3);
        let tc = TrConv2d::from_weights(spec, 4, 7, &[0.5; 36], vec![1.0, 2.0, 3.0]).unwrap();
        let y = run(&tc, &frames(2, 4, 2, |_, _, _| 0.0)).unwrap();
        for fr in &y {
            for b in 0..7 {
                assert_eq!(fr.at(b), &[1.0, 2.0, 3.0]);
            }
        }
    }
}

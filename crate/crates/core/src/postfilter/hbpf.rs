//! High-band post-filter: three strided Conv2d modules over the 160
//! high-band bins, the wide-band estimate squeezed to 48 features by a
//! pointwise Conv1d, a GRU over the concatenation, and a 1×1 Conv2d giving
//! re/im of a complex mask per bin.
//!
//! The raw mask is bounded in polar form, `|m| = clip * tanh(|raw|)`, which
//! keeps the phase and guarantees `|m| <= clip`.

use std::collections::VecDeque;

use num_complex::Complex32;
use serde_json::json;

use super::{MaskTarget, TbnnConfig};
use crate::error::{Error, Result};
use crate::nn::conv::{Conv2d, ConvSpec};
use crate::nn::norm::{BatchNorm, Dropout, Elu};
use crate::nn::params::{Binder, Init};
use crate::nn::rnn::{Gru, Linear};
use crate::nn::{check_finite, expect_shape, Frame, Layer};

#[derive(Debug, Clone)]
struct ConvModule {
    conv: Conv2d,
    bn: BatchNorm,
    dropout: Dropout,
}

#[derive(Debug, Clone)]
pub struct Hbpf {
    in_bins: usize,
    in_channels: usize,
    wb_bins: usize,
    validate: bool,
    clip: f32,
    target: MaskTarget,
    convs: Vec<ConvModule>,
    align: Linear,
    gru: Gru,
    mask: Conv2d,
}

#[derive(Debug, Clone)]
pub struct HbpfState {
    convs: Vec<(VecDeque<Frame>, <Dropout as Layer>::State)>,
    gru: Vec<f32>,
    pub(crate) mask_override: Option<Complex32>,
}

/// Polar mask bound: keeps the phase of `raw`, maps its magnitude through
/// `clip * tanh(.)`. Evaluated in f64 with the magnitude held one f32
/// epsilon below `clip`, so rounding back to f32 cannot push it over.
#[inline]
pub fn bound_mask(re: f32, im: f32, clip: f32) -> Complex32 {
    let (re, im) = (re as f64, im as f64);
    let r = re.hypot(im);
    if r == 0.0 {
        return Complex32::new(0.0, 0.0);
    }
    let cap = clip as f64 * (1.0 - f32::EPSILON as f64);
    let g = (clip as f64 * r.tanh()).min(cap) / r;
    Complex32::new((re * g) as f32, (im * g) as f32)
}

impl Hbpf {
    pub(crate) fn new(b: &mut Binder, cfg: &TbnnConfig) -> Result<Self> {
        let c = cfg.hbpf_conv_channels;
        let mut convs = Vec::with_capacity(cfg.hbpf_conv_layers);
        let mut bins = cfg.hb_bins;
        for i in 0..cfg.hbpf_conv_layers {
            let name = format!("hbpf.conv{}", i + 1);
            let cin = if i == 0 { cfg.input_channels } else { c };
            let conv = Conv2d::new(b, &format!("{name}.conv"), ConvSpec::standard(cin, c), bins)?;
            bins = conv.out_bins();
            b.layer(
                &format!("{name}.elu"),
                "ELU",
                json!({ "alpha": 1.0 }),
                (bins, c),
                (bins, c),
            );
            let bn = BatchNorm::new(b, &format!("{name}.bn"), c, bins)?;
            b.layer(
                &format!("{name}.dropout"),
                "Dropout",
                json!({ "rate": cfg.dropout }),
                (bins, c),
                (bins, c),
            );
            convs.push(ConvModule {
                conv,
                bn,
                dropout: Dropout::inference(cfg.dropout)?,
            });
        }
        let hb_feat = bins * c;

        let wb_feat = 2 * cfg.wb_bins;
        let p = cfg.hbpf_pointwise_channels;
        let init = Init::fan_in(wb_feat);
        let w = b.take("hbpf.align.weight", &[p, wb_feat, 1], init);
        let bias = b.take("hbpf.align.bias", &[p], init);
        b.layer(
            "hbpf.align",
            "PointwiseConv1d",
            json!({ "kernel": 1 }),
            (1, wb_feat),
            (1, p),
        );
        let align = Linear::from_weights(wb_feat, p, w, bias)?;

        let gru = Gru::new(b, "hbpf.gru", hb_feat + p, cfg.hbpf_gru_hidden);
        let mask = Conv2d::new(
            b,
            "hbpf.mask",
            ConvSpec::pointwise(cfg.hbpf_gru_hidden, 2 * cfg.hb_bins),
            1,
        )?;
        b.layer(
            "hbpf",
            "HBPF",
            json!({ "mask_clip": cfg.mask_clip, "mask_target": cfg.mask_target }),
            (cfg.hb_bins, cfg.input_channels),
            (cfg.hb_bins, 2),
        );
        Ok(Self {
            in_bins: cfg.hb_bins,
            in_channels: cfg.input_channels,
            wb_bins: cfg.wb_bins,
            validate: cfg.validate_layers,
            clip: cfg.mask_clip,
            target: cfg.mask_target,
            convs,
            align,
            gru,
            mask,
        })
    }

    pub fn init_state(&self) -> HbpfState {
        HbpfState {
            convs: self
                .convs
                .iter()
                .map(|m| (m.conv.init_state(), m.dropout.init_state()))
                .collect(),
            gru: self.gru.init_state(),
            mask_override: None,
        }
    }

    pub fn mask_clip(&self) -> f32 {
        self.clip
    }

    /// One frame: `[160 × 6]` high-band stack and the `[321 × 2]` wide-band
    /// estimate in; bounded mask and `[160 × 2]` masked target out.
    pub fn step(&self, st: &mut HbpfState, x: &Frame, wb_out: &Frame) -> Result<(Vec<Complex32>, Frame)> {
        expect_shape(x, self.in_bins, self.in_channels, "hbpf input")?;
        expect_shape(wb_out, self.wb_bins, 2, "hbpf wide-band side input")?;
        let mut h = x.clone();
        for (m, (cs, ds)) in self.convs.iter().zip(st.convs.iter_mut()) {
            h = m.conv.step(cs, &h)?;
            Elu::apply(&mut h);
            m.bn.apply(&mut h)?;
            h = m.dropout.step(ds, &h)?;
        }
        let mut feat = h.data;
        let mut aligned = vec![0.0f32; self.align.output];
        self.align.apply(&wb_out.data, &mut aligned);
        feat.extend_from_slice(&aligned);
        let g = self.gru.step(&mut st.gru, &Frame::vector(feat))?;
        let raw = self.mask.step(&mut VecDeque::new(), &g)?;
        if self.validate {
            check_finite(&raw, "hbpf mask head")?;
        }

        let mask: Vec<Complex32> = match st.mask_override {
            Some(m) => vec![m; self.in_bins],
            None => raw
                .data
                .chunks_exact(2)
                .map(|v| bound_mask(v[0], v[1], self.clip))
                .collect(),
        };
        let off = match self.target {
            MaskTarget::D => 0,
            MaskTarget::E => 2,
        };
        let mut out = Frame::zeros(self.in_bins, 2);
        for (f, m) in mask.iter().enumerate() {
            let src = x.at(f);
            let v = *m * Complex32::new(src[off], src[off + 1]);
            let dst = out.at_mut(f);
            dst[0] = v.re;
            dst[1] = v.im;
        }
        if mask.iter().any(|m| !(m.re.is_finite() && m.im.is_finite())) {
            return Err(Error::NonFinite("hbpf mask".into()));
        }
        Ok((mask, out))
    }
}

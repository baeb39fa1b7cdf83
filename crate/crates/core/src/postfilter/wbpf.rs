//! Wide-band post-filter: gated U²-encoder, FTLSTM bottleneck, gated
//! transposed-conv decoder with 1×1 skip paths, and a VAD head.
//!
//! Decoder block `i` (run deepest first) computes
//! `act(bn(gtrconv(prev + skip_i(enc_i))))`; the last block is a plain
//! transposed conv to 2 channels (re/im of the compressed estimate) with no
//! output nonlinearity.

use std::collections::VecDeque;

use serde_json::json;

use super::TbnnConfig;
use crate::error::Result;
use crate::nn::conv::{gconv, gtrconv, Conv2d, ConvSpec, Gated, TrConv2d};
use crate::nn::norm::{BatchNorm, PRelu};
use crate::nn::params::Binder;
use crate::nn::rnn::{FtLstm, Gru, Linear, LstmState};
use crate::nn::unet::UNetBlock;
use crate::nn::{check_finite, expect_shape, sigmoid, Frame, Layer};

#[derive(Debug, Clone)]
struct EncoderLayer {
    gconv: Gated<Conv2d>,
    bn: BatchNorm,
    act: PRelu,
    unet: UNetBlock,
}

#[derive(Debug, Clone)]
enum Up {
    Gated(Gated<TrConv2d>, BatchNorm, PRelu),
    Plain(TrConv2d),
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    skip: Conv2d,
    up: Up,
}

#[derive(Debug, Clone)]
pub struct Wbpf {
    in_bins: usize,
    in_channels: usize,
    validate: bool,
    enc: Vec<EncoderLayer>,
    ftlstm: FtLstm,
    /// `dec[i]` pairs with `enc[i]`; evaluated from the last index down.
    dec: Vec<DecoderBlock>,
    vad_gru: Gru,
    vad_fc: Linear,
}

#[derive(Debug, Clone)]
pub struct WbpfState {
    enc: Vec<(VecDeque<Frame>, Vec<VecDeque<Frame>>)>,
    ft: Vec<LstmState>,
    dec: Vec<VecDeque<Frame>>,
    vad: Vec<f32>,
}

impl Wbpf {
    pub(crate) fn new(b: &mut Binder, cfg: &TbnnConfig) -> Result<Self> {
        let c = cfg.channels;
        let mut widths = vec![cfg.wb_bins];
        let mut enc = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let name = format!("wbpf.enc{}", i + 1);
            let cin = if i == 0 { cfg.input_channels } else { c };
            let fin = widths[i];
            let g = gconv(b, &format!("{name}.gconv"), ConvSpec::standard(cin, c), fin)?;
            let fout = g.inner.out_bins();
            widths.push(fout);
            enc.push(EncoderLayer {
                gconv: g,
                bn: BatchNorm::new(b, &format!("{name}.bn"), c, fout)?,
                act: PRelu::new(b, &format!("{name}.act"), c, fout),
                unet: UNetBlock::new(b, &format!("{name}.unet"), fout, c, cfg.unet_depth)?,
            });
        }
        let fb = widths[cfg.encoder_layers];
        let ftlstm = FtLstm::new(b, "wbpf.ftlstm", fb, c, cfg.ftlstm_hidden);

        let vad_gru = Gru::new(b, "wbpf.vad.gru", fb * c, cfg.vad_hidden);
        let vad_fc = Linear::new(b, "wbpf.vad.fc", cfg.vad_hidden, 1, 1);

        let mut dec = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let name = format!("wbpf.dec{}", i + 1);
            let (fin, fout) = (widths[i + 1], widths[i]);
            let skip = Conv2d::new(b, &format!("{name}.skip"), ConvSpec::pointwise(c, c), fin)?;
            let up = if i == 0 {
                Up::Plain(TrConv2d::new(
                    b,
                    &format!("{name}.trconv"),
                    ConvSpec::standard(c, 2),
                    fin,
                    fout,
                )?)
            } else {
                Up::Gated(
                    gtrconv(b, &format!("{name}.trconv"), ConvSpec::standard(c, c), fin, fout)?,
                    BatchNorm::new(b, &format!("{name}.bn"), c, fout)?,
                    PRelu::new(b, &format!("{name}.act"), c, fout),
                )
            };
            dec.push(DecoderBlock { skip, up });
        }
        b.layer(
            "wbpf",
            "WBPF",
            json!({ "widths": widths, "channels": c }),
            (cfg.wb_bins, cfg.input_channels),
            (cfg.wb_bins, 2),
        );
        Ok(Self {
            in_bins: cfg.wb_bins,
            in_channels: cfg.input_channels,
            validate: cfg.validate_layers,
            enc,
            ftlstm,
            dec,
            vad_gru,
            vad_fc,
        })
    }

    pub fn init_state(&self) -> WbpfState {
        WbpfState {
            enc: self
                .enc
                .iter()
                .map(|l| (l.gconv.init_state(), l.unet.init_state()))
                .collect(),
            ft: self.ftlstm.init_state(),
            dec: self
                .dec
                .iter()
                .map(|d| match &d.up {
                    Up::Gated(g, _, _) => g.init_state(),
                    Up::Plain(t) => t.init_state(),
                })
                .collect(),
            vad: self.vad_gru.init_state(),
        }
    }

    fn check(&self, x: &Frame, what: &str) -> Result<()> {
        if self.validate {
            check_finite(x, what)?;
        }
        Ok(())
    }

    /// One frame: `[321 × 6]` in, `[321 × 2]` and the VAD probability out.
    pub fn step(&self, st: &mut WbpfState, x: &Frame) -> Result<(Frame, f32)> {
        expect_shape(x, self.in_bins, self.in_channels, "wbpf input")?;
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for (layer, (cs, us)) in self.enc.iter().zip(st.enc.iter_mut()) {
            h = layer.gconv.step(cs, &h)?;
            layer.bn.apply(&mut h)?;
            layer.act.apply(&mut h)?;
            h = layer.unet.step(us, &h)?;
            self.check(&h, "wbpf encoder")?;
            skips.push(h.clone());
        }
        h = self.ftlstm.step(&mut st.ft, &h)?;
        self.check(&h, "wbpf ftlstm")?;

        let hv = self.vad_gru.step(&mut st.vad, &Frame::vector(h.data.clone()))?;
        let mut logit = [0.0f32];
        self.vad_fc.apply(&hv.data, &mut logit);
        let vad = sigmoid(logit[0]);

        for i in (0..self.dec.len()).rev() {
            let block = &self.dec[i];
            h.add_assign(&block.skip.step(&mut VecDeque::new(), &skips[i])?)?;
            h = match &block.up {
                Up::Gated(g, bn, act) => {
                    let mut y = g.step(&mut st.dec[i], &h)?;
                    bn.apply(&mut y)?;
                    act.apply(&mut y)?;
                    y
                }
                Up::Plain(t) => t.step(&mut st.dec[i], &h)?,
            };
            self.check(&h, "wbpf decoder")?;
        }
        Ok((h, vad))
    }
}

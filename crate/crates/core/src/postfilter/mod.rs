//! Two-step band-split post-filter.
//!
//! The wide-band net (0–16 kHz, 321 bins) maps compressed d, e, y straight
//! to a compressed clean estimate and a per-frame VAD probability. The
//! high-band net (16–24 kHz, 160 bins) predicts a bounded complex mask for
//! the high band, using the wide-band estimate as side information.

mod hbpf;
mod wbpf;

pub use hbpf::{Hbpf, HbpfState};
pub use wbpf::{Wbpf, WbpfState};

use num_complex::{Complex32, Complex64};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsp::{BandSplitSpec, BandStack, Spectrogram};
use crate::error::{Error, Result, WeightError};
use crate::nn::manifest::{ManifestMetadata, ManifestSource, Recorder};
use crate::nn::params::{Binder, LayerInfo, ParamSource, ParamSpec, SeedSource};
use crate::nn::{Frame, WeightManifest};

/// Reference parameter count of the large model; informational only.
pub const REFERENCE_PARAMS_LARGE: f64 = 9.56e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Large,
}

impl Preset {
    pub fn channels(self) -> usize {
        match self {
            Preset::Small => 80,
            Preset::Large => 128,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Preset::Small),
            "large" => Ok(Preset::Large),
            _ => Err(Error::Config(format!("unknown preset {s:?} (small|large)"))),
        }
    }
}

/// Which high-band input spectrum the predicted mask multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskTarget {
    /// Linear-filter error signal.
    E,
    /// Microphone signal.
    D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TbnnConfig {
    pub channels: usize,
    pub wb_bins: usize,
    pub hb_bins: usize,
    pub input_channels: usize,
    pub encoder_layers: usize,
    pub unet_depth: usize,
    pub ftlstm_hidden: usize,
    pub vad_hidden: usize,
    pub hbpf_conv_channels: usize,
    pub hbpf_conv_layers: usize,
    pub hbpf_pointwise_channels: usize,
    pub hbpf_gru_hidden: usize,
    pub dropout: f32,
    pub compression: f64,
    /// Upper bound on the high-band mask magnitude.
    pub mask_clip: f32,
    pub mask_target: MaskTarget,
    /// Scale the estimate by the VAD probability. Off by default: the VAD
    /// head is a training auxiliary surfaced as diagnostics.
    pub vad_gate: bool,
    /// Check every layer output for non-finite values.
    pub validate_layers: bool,
}

impl Default for TbnnConfig {
    fn default() -> Self {
        Self::preset(Preset::Small)
    }
}

impl TbnnConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            channels: p.channels(),
            wb_bins: 321,
            hb_bins: 160,
            input_channels: 6,
            encoder_layers: 5,
            unet_depth: 2,
            ftlstm_hidden: 128,
            vad_hidden: 64,
            hbpf_conv_channels: 128,
            hbpf_conv_layers: 3,
            hbpf_pointwise_channels: 48,
            hbpf_gru_hidden: 256,
            dropout: 0.25,
            compression: 0.5,
            mask_clip: 2.0,
            mask_target: MaskTarget::E,
            vad_gate: false,
            validate_layers: cfg!(debug_assertions),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.channels,
            self.wb_bins,
            self.hb_bins,
            self.encoder_layers,
            self.unet_depth,
            self.ftlstm_hidden,
            self.vad_hidden,
            self.hbpf_conv_channels,
            self.hbpf_conv_layers,
            self.hbpf_pointwise_channels,
            self.hbpf_gru_hidden,
        ];
        if counts.contains(&0) {
            return Err(Error::Config("post-filter sizes must be positive".into()));
        }
        if self.input_channels != 6 {
            return Err(Error::Config(format!(
                "post-filter input is re/im of d, e, y (6 channels), got {}",
                self.input_channels
            )));
        }
        let split = BandSplitSpec::default();
        if self.wb_bins != split.split || self.wb_bins + self.hb_bins != split.total {
            return Err(Error::Config(format!(
                "band sizes {}+{} do not match the {}+{} split",
                self.wb_bins,
                self.hb_bins,
                split.split,
                split.total - split.split
            )));
        }
        if !(self.mask_clip > 0.0 && self.mask_clip.is_finite()) {
            return Err(Error::Config("mask_clip must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config("compression must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Streaming state for one stream.
#[derive(Debug, Clone)]
pub struct PostFilterState {
    pub(crate) wb: WbpfState,
    pub(crate) hb: HbpfState,
}

impl PostFilterState {
    /// Test hook: replace the predicted high-band mask by a constant.
    pub fn set_mask_override(&mut self, mask: Option<Complex32>) {
        self.hb.mask_override = mask;
    }
}

/// One frame of post-filter output.
#[derive(Debug, Clone, PartialEq)]
pub struct PostFilterFrame {
    /// Compressed full-band estimate, 481 bins.
    pub estimate: Vec<Complex64>,
    pub vad: f64,
    /// High-band mask, 160 bins.
    pub mask: Vec<Complex64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Description {
    pub model: String,
    pub config: TbnnConfig,
    pub config_hash: String,
    pub param_count: usize,
    pub wbpf_params: usize,
    pub hbpf_params: usize,
    pub reference_param_count: f64,
    /// Relative deviation from the reference count, large preset only.
    pub reference_deviation: Option<f64>,
    pub tensors: Vec<ParamSpec>,
    pub layers: Vec<LayerInfo>,
}

#[derive(Debug, Clone)]
pub struct PostFilter {
    cfg: TbnnConfig,
    wbpf: Wbpf,
    hbpf: Hbpf,
    specs: Vec<ParamSpec>,
    layers: Vec<LayerInfo>,
}

pub const MODEL_NAME: &str = "tbnn";

impl PostFilter {
    pub fn build(cfg: TbnnConfig, source: &mut dyn ParamSource) -> Result<Self> {
        cfg.validate()?;
        let mut b = Binder::new(source);
        let wbpf = Wbpf::new(&mut b, &cfg)?;
        let hbpf = Hbpf::new(&mut b, &cfg)?;
        let (specs, layers) = b.finish()?;
        Ok(Self {
            cfg,
            wbpf,
            hbpf,
            specs,
            layers,
        })
    }

    pub fn seeded(cfg: TbnnConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, &mut SeedSource { seed })
    }

    /// Binds every parameter from `manifest`. Entries the graph does not use
    /// are an error unless `allow_unused`.
    pub fn from_manifest(cfg: TbnnConfig, manifest: &WeightManifest, allow_unused: bool) -> Result<Self> {
        let mut src = ManifestSource::new(manifest);
        let pf = Self::build(cfg, &mut src)?;
        let unused = src.unused();
        if !unused.is_empty() && !allow_unused {
            return Err(WeightError::Unused(unused).into());
        }
        Ok(pf)
    }

    /// Seeded parameters packed into a manifest.
    pub fn seed_manifest(cfg: TbnnConfig, seed: u64) -> Result<(Self, WeightManifest)> {
        let mut seed_src = SeedSource { seed };
        let meta = ManifestMetadata {
            model: MODEL_NAME.into(),
            config_hash: cfg.hash(),
            extra: [("seed".to_string(), serde_json::json!(seed))].into(),
        };
        let mut rec = Recorder::new(&mut seed_src, meta);
        let pf = Self::build(cfg, &mut rec)?;
        Ok((pf, rec.manifest))
    }

    pub fn config(&self) -> &TbnnConfig {
        &self.cfg
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(ParamSpec::numel).sum()
    }

    pub fn describe(&self) -> Description {
        let count = |prefix: &str| {
            self.specs
                .iter()
                .filter(|s| s.name.starts_with(prefix))
                .map(ParamSpec::numel)
                .sum()
        };
        let total = self.param_count();
        let large = self.cfg.channels == Preset::Large.channels();
        Description {
            model: MODEL_NAME.into(),
            config: self.cfg.clone(),
            config_hash: self.cfg.hash(),
            param_count: total,
            wbpf_params: count("wbpf."),
            hbpf_params: count("hbpf."),
            reference_param_count: REFERENCE_PARAMS_LARGE,
            reference_deviation: large.then(|| (total as f64 - REFERENCE_PARAMS_LARGE) / REFERENCE_PARAMS_LARGE),
            tensors: self.specs.clone(),
            layers: self.layers.clone(),
        }
    }

    /// Graph definition (config, layers, tensors) for external trainers.
    pub fn graph_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.describe())?)
    }

    pub fn new_state(&self) -> PostFilterState {
        PostFilterState {
            wb: self.wbpf.init_state(),
            hb: self.hbpf.init_state(),
        }
    }

    pub fn reset(&self, state: &mut PostFilterState) {
        *state = self.new_state();
    }

    pub fn wbpf(&self) -> &Wbpf {
        &self.wbpf
    }

    pub fn hbpf(&self) -> &Hbpf {
        &self.hbpf
    }

    /// One frame. `d`, `e`, `y` are compressed 481-bin spectra.
    pub fn step(
        &self,
        state: &mut PostFilterState,
        d: &[Complex64],
        e: &[Complex64],
        y: &[Complex64],
    ) -> Result<PostFilterFrame> {
        let total = self.cfg.wb_bins + self.cfg.hb_bins;
        if d.len() != total || e.len() != total || y.len() != total {
            return Err(Error::Contract(format!("post-filter frames must have {total} bins")));
        }
        let wb = self.cfg.wb_bins;
        let wb_in = stack_frame(&[&d[..wb], &e[..wb], &y[..wb]]);
        let hb_in = stack_frame(&[&d[wb..], &e[wb..], &y[wb..]]);
        let (wb_out, vad) = self.wbpf.step(&mut state.wb, &wb_in)?;
        let (mask, hb_out) = self.hbpf.step(&mut state.hb, &hb_in, &wb_out)?;
        let gain = if self.cfg.vad_gate { vad } else { 1.0 };
        let mut estimate = Vec::with_capacity(total);
        for fr in [&wb_out, &hb_out] {
            for f in 0..fr.bins {
                let v = fr.at(f);
                estimate.push(Complex64::new((v[0] * gain) as f64, (v[1] * gain) as f64));
            }
        }
        Ok(PostFilterFrame {
            estimate,
            vad: vad as f64,
            mask: mask.iter().map(|m| Complex64::new(m.re as f64, m.im as f64)).collect(),
        })
    }

    /// Whole-utterance wide-band pass: `[6 × T × 321]` compressed stack in,
    /// compressed estimate and per-frame VAD out.
    pub fn wbpf_forward(&self, wb_in: &BandStack) -> Result<(Spectrogram, Vec<f64>)> {
        check_stack(wb_in, self.cfg.input_channels, self.cfg.wb_bins)?;
        let mut st = self.wbpf.init_state();
        let mut out = Spectrogram::zeros(wb_in.frames, self.cfg.wb_bins);
        out.compression = wb_in.compression;
        let mut vad = Vec::with_capacity(wb_in.frames);
        for t in 0..wb_in.frames {
            let (y, v) = self.wbpf.step(&mut st, &stack_frame_at(wb_in, t))?;
            write_complex(&y, out.frame_mut(t));
            vad.push(v as f64);
        }
        Ok((out, vad))
    }

    /// Whole-utterance high-band pass. Returns the mask `[T][160]` and the
    /// compressed high-band estimate.
    pub fn hbpf_forward(&self, hb_in: &BandStack, wb_out: &Spectrogram) -> Result<(Vec<Vec<Complex64>>, Spectrogram)> {
        check_stack(hb_in, self.cfg.input_channels, self.cfg.hb_bins)?;
        if wb_out.frames != hb_in.frames || wb_out.bins != self.cfg.wb_bins {
            return Err(Error::Contract(format!(
                "high-band input has {} frames but wide-band output is {}x{}",
                hb_in.frames, wb_out.frames, wb_out.bins
            )));
        }
        let mut st = self.hbpf.init_state();
        let mut out = Spectrogram::zeros(hb_in.frames, self.cfg.hb_bins);
        out.compression = hb_in.compression;
        let mut masks = Vec::with_capacity(hb_in.frames);
        for t in 0..hb_in.frames {
            let wb = complex_frame(wb_out.frame(t));
            let (m, y) = self.hbpf.step(&mut st, &stack_frame_at(hb_in, t), &wb)?;
            write_complex(&y, out.frame_mut(t));
            masks.push(m.iter().map(|c| Complex64::new(c.re as f64, c.im as f64)).collect());
        }
        Ok((masks, out))
    }
}

fn check_stack(x: &BandStack, channels: usize, bins: usize) -> Result<()> {
    if x.channels != channels || x.bins != bins {
        return Err(Error::Contract(format!(
            "expected a {channels}-channel stack over {bins} bins, got {}x{}",
            x.channels, x.bins
        )));
    }
    Ok(())
}

/// Channel-last frame `[bins][re s1, im s1, re s2, ...]`.
fn stack_frame(specs: &[&[Complex64]]) -> Frame {
    let bins = specs[0].len();
    let ch = 2 * specs.len();
    let mut fr = Frame::zeros(bins, ch);
    for f in 0..bins {
        let dst = fr.at_mut(f);
        for (i, s) in specs.iter().enumerate() {
            dst[2 * i] = s[f].re as f32;
            dst[2 * i + 1] = s[f].im as f32;
        }
    }
    fr
}

fn stack_frame_at(x: &BandStack, t: usize) -> Frame {
    let mut fr = Frame::zeros(x.bins, x.channels);
    for f in 0..x.bins {
        for c in 0..x.channels {
            fr.at_mut(f)[c] = x.get(c, t, f) as f32;
        }
    }
    fr
}

fn complex_frame(x: &[Complex64]) -> Frame {
    stack_frame(&[x])
}

fn write_complex(y: &Frame, dst: &mut [Complex64]) {
    for (f, d) in dst.iter_mut().enumerate() {
        let v = y.at(f);
        *d = Complex64::new(v[0] as f64, v[1] as f64);
    }
}

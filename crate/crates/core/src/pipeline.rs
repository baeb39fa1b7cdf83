//! Streaming echo canceller: delay tracking, reference alignment, STFT,
//! per-bin NLMS, post-filter and overlap-add resynthesis, one hop at a time.
//!
//! Input is consumed in hops of `stft.hop` samples. Frame `t` covers input
//! samples `[t·hop − lead, (t+1)·hop)` with `lead = win_len − hop`; once it
//! has been synthesised, output samples `[t·hop − lead, (t+1)·hop − lead)`
//! are final and are emitted. Output sample `n` therefore depends on input
//! up to the end of the hop containing `n + lead`, never more than
//! `win_len − 1` samples ahead. The emitted stream is time-aligned
//! with the input: its first sample corresponds to input sample 0.
//!
//! Work is done per hop regardless of how the caller chunks its input, so
//! any chunking gives the same output bits.

use std::collections::VecDeque;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::AudioBuffer;
use crate::dsp::{compress_value, FrameAnalyzer, FrameSynthesizer, StftConfig};
use crate::error::{ensure_finite, Error, Result, Stage};
use crate::nlms::{snap_complex, NlmsConfig, NlmsState};
use crate::postfilter::{PostFilter, PostFilterState, TbnnConfig};
use crate::tde::{DelayEstimate, DelayTracker, TdeConfig};

/// How the reference is aligned to the microphone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DelayMode {
    /// Block-wise tracking with the streaming delay estimator.
    Track,
    /// A known bulk delay in samples.
    Fixed(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub tde: TdeConfig,
    pub nlms: NlmsConfig,
    pub postfilter: TbnnConfig,
    pub delay: DelayMode,
    /// Tracked estimates below this confidence are ignored.
    pub min_confidence: f64,
    /// Samples subtracted from the tracked delay before alignment, so small
    /// overestimates leave the echo inside the causal filter taps.
    pub delay_margin: usize,
    /// The applied delay only moves when the target differs by more than this.
    pub delay_hysteresis: usize,
    /// Skip the post-filter and output the linear-stage error.
    pub linear_only: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            tde: TdeConfig::default(),
            nlms: NlmsConfig::default(),
            postfilter: TbnnConfig::default(),
            delay: DelayMode::Track,
            min_confidence: 0.3,
            delay_margin: 480,
            delay_hysteresis: 120,
            linear_only: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        self.tde.validate()?;
        self.nlms.validate()?;
        if self.nlms.bins != self.stft.bins() {
            return Err(Error::Config(format!(
                "NLMS runs on {} bins but the STFT has {}",
                self.nlms.bins,
                self.stft.bins()
            )));
        }
        if !self.linear_only {
            self.postfilter.validate()?;
            let pf_bins = self.postfilter.wb_bins + self.postfilter.hb_bins;
            if pf_bins != self.stft.bins() {
                return Err(Error::Config(format!(
                    "post-filter covers {pf_bins} bins but the STFT has {}",
                    self.stft.bins()
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.min_confidence) {
            return Err(Error::Config("min_confidence must lie in [0, 1]".into()));
        }
        if let DelayMode::Fixed(d) = self.delay {
            if d > self.tde.max_delay {
                return Err(Error::Config(format!(
                    "fixed delay {d} exceeds max_delay {}",
                    self.tde.max_delay
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        Sha256::digest(json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Wall-clock time spent per stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub analysis: Duration,
    pub delay: Duration,
    pub linear: Duration,
    pub postfilter: Duration,
    pub synthesis: Duration,
}

impl StageTimes {
    /// Everything except the post-filter.
    pub fn front_end(&self) -> Duration {
        self.analysis + self.delay + self.linear + self.synthesis
    }

    pub fn total(&self) -> Duration {
        self.front_end() + self.postfilter
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    /// Applied alignment delay per frame, in samples.
    pub delay: Vec<usize>,
    /// Every tracker update as `(frame, estimate)`.
    pub delay_updates: Vec<(usize, DelayEstimate)>,
    /// Post-filter VAD probability per frame (empty in linear-only mode).
    pub vad: Vec<f64>,
    /// Per-frame spectral energy ratio of microphone to output, in dB.
    pub erle_db: Vec<f64>,
    /// Same for the linear-stage error.
    pub linear_erle_db: Vec<f64>,
    #[serde(skip)]
    pub times: StageTimes,
}

impl Diagnostics {
    pub fn frames(&self) -> usize {
        self.delay.len()
    }

    /// Last tracker estimate, if any.
    pub fn final_estimate(&self) -> Option<DelayEstimate> {
        self.delay_updates.last().map(|(_, e)| *e)
    }
}

/// Floor for per-frame energy ratios, so silent frames stay finite.
const ENERGY_FLOOR: f64 = 1e-20;

fn ratio_db(num: f64, den: f64) -> f64 {
    10.0 * ((num + ENERGY_FLOOR) / (den + ENERGY_FLOOR)).log10()
}

fn energy(x: &[Complex64]) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum()
}

fn timed<T>(acc: &mut Duration, f: impl FnOnce() -> T) -> T {
    let t0 = Instant::now();
    let out = f();
    *acc += t0.elapsed();
    out
}

/// One echo-cancellation stream.
pub struct AecStream {
    cfg: PipelineConfig,
    postfilter: Option<(Arc<PostFilter>, PostFilterState)>,
    analyzer: FrameAnalyzer,
    synthesizer: FrameSynthesizer,
    tracker: DelayTracker,
    nlms: NlmsState,
    applied_delay: usize,
    /// Last `win_len` microphone samples (leading pad included).
    mic_win: Vec<f64>,
    /// Raw reference history, long enough for `max_delay + win_len`.
    ref_hist: VecDeque<f64>,
    ola: Vec<f64>,
    echo_ola: Option<Vec<f64>>,
    pending_mic: Vec<f64>,
    pending_ref: Vec<f64>,
    consumed: usize,
    emitted: usize,
    frame: usize,
    diag: Diagnostics,
    echo_out: Vec<f64>,
    // Per-frame scratch.
    d: Vec<Complex64>,
    x_raw: Vec<Complex64>,
    x: Vec<Complex64>,
    e: Vec<Complex64>,
    y: Vec<Complex64>,
    s: Vec<Complex64>,
    frame_buf: Vec<f64>,
    synth_buf: Vec<f64>,
}

/// Result of [`AecStream::finish`].
#[derive(Debug)]
pub struct Finished {
    /// Remaining output samples.
    pub tail: Vec<f64>,
    pub diagnostics: Diagnostics,
    /// Resynthesised linear echo estimate, when requested.
    pub echo: Option<Vec<f64>>,
}

impl AecStream {
    /// `postfilter` may be `None` only in linear-only mode.
    pub fn new(cfg: PipelineConfig, postfilter: Option<Arc<PostFilter>>) -> Result<Self> {
        cfg.validate()?;
        let postfilter = match (cfg.linear_only, postfilter) {
            (true, _) => None,
            (false, Some(pf)) => {
                if pf.config().wb_bins + pf.config().hb_bins != cfg.stft.bins() {
                    return Err(Error::Config("post-filter does not match the STFT size".into()));
                }
                let st = pf.new_state();
                Some((pf, st))
            }
            (false, None) => {
                return Err(Error::Config(
                    "a post-filter is required unless linear_only is set".into(),
                ))
            }
        };
        let s = &cfg.stft;
        let bins = s.bins();
        let hist = cfg.tde.max_delay + s.win_len;
        let zeros = vec![Complex64::default(); bins];
        Ok(Self {
            analyzer: FrameAnalyzer::new(s),
            synthesizer: FrameSynthesizer::new(s),
            tracker: DelayTracker::new(cfg.tde, *s)?,
            nlms: NlmsState::new(cfg.nlms)?,
            applied_delay: match cfg.delay {
                DelayMode::Fixed(d) => d,
                DelayMode::Track => 0,
            },
            mic_win: vec![0.0; s.win_len],
            ref_hist: std::iter::repeat_n(0.0, hist).collect(),
            ola: vec![0.0; s.win_len],
            echo_ola: None,
            pending_mic: Vec::new(),
            pending_ref: Vec::new(),
            consumed: 0,
            emitted: 0,
            frame: 0,
            diag: Diagnostics::default(),
            echo_out: Vec::new(),
            d: zeros.clone(),
            x_raw: zeros.clone(),
            x: zeros.clone(),
            e: zeros.clone(),
            y: zeros.clone(),
            s: zeros,
            frame_buf: vec![0.0; s.win_len],
            synth_buf: vec![0.0; s.win_len],
            postfilter,
            cfg,
        })
    }

    /// Also resynthesise the linear echo estimate `y`.
    pub fn keep_echo_estimate(&mut self) {
        if self.echo_ola.is_none() {
            self.echo_ola = Some(vec![0.0; self.cfg.stft.win_len]);
        }
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    /// Back to the state of a freshly constructed stream.
    pub fn reset(&mut self) -> Result<()> {
        let pf = self.postfilter.as_ref().map(|(pf, _)| Arc::clone(pf));
        let keep_echo = self.echo_ola.is_some();
        *self = Self::new(self.cfg.clone(), pf)?;
        if keep_echo {
            self.keep_echo_estimate();
        }
        Ok(())
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diag
    }

    pub fn applied_delay(&self) -> usize {
        self.applied_delay
    }

    /// Algorithmic latency in samples.
    pub fn latency(&self) -> usize {
        self.cfg.stft.lead_pad()
    }

    /// Feeds equal-length chunks of microphone and reference and returns
    /// whatever output became final.
    pub fn push(&mut self, mic: &[f64], reference: &[f64]) -> Result<Vec<f64>> {
        if mic.len() != reference.len() {
            return Err(Error::Contract(format!(
                "microphone chunk has {} samples, reference {}",
                mic.len(),
                reference.len()
            ))
            .in_stage(Stage::Input));
        }
        ensure_finite(mic, "microphone input").map_err(|e| e.in_stage(Stage::Input))?;
        ensure_finite(reference, "reference input").map_err(|e| e.in_stage(Stage::Input))?;
        self.pending_mic.extend_from_slice(mic);
        self.pending_ref.extend_from_slice(reference);
        self.consumed += mic.len();
        let hop = self.cfg.stft.hop;
        let mut out = Vec::with_capacity(self.pending_mic.len() / hop * hop);
        let mut used = 0;
        while self.pending_mic.len() - used >= hop {
            let (m, r) = (
                self.pending_mic[used..used + hop].to_vec(),
                self.pending_ref[used..used + hop].to_vec(),
            );
            self.process_hop(&m, &r, &mut out)?;
            used += hop;
        }
        self.pending_mic.drain(..used);
        self.pending_ref.drain(..used);
        Ok(out)
    }

    /// Zero-pads the input to flush the last frames and returns the
    /// remaining output, so that the total output length equals the total
    /// input length.
    pub fn finish(mut self) -> Result<Finished> {
        let hop = self.cfg.stft.hop;
        let mut out = Vec::new();
        let target = self.consumed;
        let zeros = vec![0.0; hop];
        if !self.pending_mic.is_empty() {
            let (mut m, mut r) = (
                std::mem::take(&mut self.pending_mic),
                std::mem::take(&mut self.pending_ref),
            );
            m.resize(hop, 0.0);
            r.resize(hop, 0.0);
            self.process_hop(&m, &r, &mut out)?;
        }
        while self.emitted < target {
            self.process_hop(&zeros, &zeros, &mut out)?;
        }
        let excess = self.emitted - target;
        out.truncate(out.len() - excess);
        let echo = self.echo_ola.as_ref().map(|_| {
            let mut e = std::mem::take(&mut self.echo_out);
            e.truncate(target);
            e
        });
        Ok(Finished {
            tail: out,
            diagnostics: self.diag,
            echo,
        })
    }

    fn process_hop(&mut self, mic: &[f64], reference: &[f64], out: &mut Vec<f64>) -> Result<()> {
        let s = self.cfg.stft;
        let (hop, win) = (s.hop, s.win_len);
        let mut times = self.diag.times;

        timed(&mut times.analysis, || {
            self.mic_win.copy_within(hop.., 0);
            self.mic_win[win - hop..].copy_from_slice(mic);
            self.analyzer.analyze(&self.mic_win, &mut self.d);
            for c in &mut self.d {
                *c = snap_complex(*c);
            }
            for &v in reference {
                self.ref_hist.pop_front();
                self.ref_hist.push_back(v);
            }
        });

        timed(&mut times.delay, || -> Result<()> {
            if self.cfg.delay == DelayMode::Track {
                let n = self.ref_hist.len();
                for (dst, src) in self.frame_buf.iter_mut().zip(self.ref_hist.range(n - win..)) {
                    *dst = *src;
                }
                self.analyzer.analyze(&self.frame_buf, &mut self.x_raw);
                if let Some(est) = self.tracker.push(&self.d, &self.x_raw) {
                    self.diag.delay_updates.push((self.frame, est));
                    if est.confidence >= self.cfg.min_confidence {
                        let target = est.delay.saturating_sub(self.cfg.delay_margin);
                        if target.abs_diff(self.applied_delay) > self.cfg.delay_hysteresis {
                            self.applied_delay = target;
                        }
                    }
                }
            }
            // Aligned reference frame: the window ending `applied_delay`
            // samples before the newest reference sample.
            let n = self.ref_hist.len();
            let end = n - self.applied_delay;
            for (dst, src) in self.frame_buf.iter_mut().zip(self.ref_hist.range(end - win..end)) {
                *dst = *src;
            }
            self.analyzer.analyze(&self.frame_buf, &mut self.x);
            Ok(())
        })
        .map_err(|e| e.in_stage(Stage::DelayEstimation))?;

        timed(&mut times.linear, || {
            self.nlms.step(&self.d, &self.x, &mut self.e, &mut self.y)
        })
        .map_err(|e| e.in_stage(Stage::LinearFilter))?;

        let vad = match &mut self.postfilter {
            None => {
                self.s.copy_from_slice(&self.e);
                None
            }
            Some((pf, st)) => {
                let p = self.cfg.postfilter.compression;
                let (d, e, y, s) = (&self.d, &self.e, &self.y, &mut self.s);
                let fr = timed(&mut times.postfilter, || -> Result<_> {
                    let c = |v: &[Complex64]| -> Vec<Complex64> { v.iter().map(|&z| compress_value(z, p)).collect() };
                    let fr = pf.step(st, &c(d), &c(e), &c(y))?;
                    for (dst, &z) in s.iter_mut().zip(&fr.estimate) {
                        *dst = compress_value(z, 1.0 / p);
                    }
                    Ok(fr)
                })
                .map_err(|e| e.in_stage(Stage::PostFilter))?;
                Some(fr.vad)
            }
        };
        if !self.s.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
            return Err(Error::NonFinite("output spectrum".into()).in_stage(Stage::PostFilter));
        }

        timed(&mut times.synthesis, || {
            overlap_add(&mut self.synthesizer, &self.s, &mut self.ola, &mut self.synth_buf);
            if let Some(ola) = &mut self.echo_ola {
                overlap_add(&mut self.synthesizer, &self.y, ola, &mut self.synth_buf);
            }
        });

        // Frame t finalises output [t·hop − lead, (t+1)·hop − lead).
        let lead = s.lead_pad();
        let start = self.frame * hop;
        let skip = lead.saturating_sub(start).min(hop);
        out.extend_from_slice(&self.ola[skip..hop]);
        if let Some(ola) = &self.echo_ola {
            self.echo_out.extend_from_slice(&ola[skip..hop]);
        }
        self.emitted += hop - skip;
        self.ola.copy_within(hop.., 0);
        self.ola[win - hop..].fill(0.0);
        if let Some(ola) = &mut self.echo_ola {
            ola.copy_within(hop.., 0);
            ola[win - hop..].fill(0.0);
        }

        let (pd, pe, ps) = (energy(&self.d), energy(&self.e), energy(&self.s));
        self.diag.delay.push(self.applied_delay);
        self.diag.erle_db.push(ratio_db(pd, ps));
        self.diag.linear_erle_db.push(ratio_db(pd, pe));
        if let Some(v) = vad {
            self.diag.vad.push(v);
        }
        self.diag.times = times;
        self.frame += 1;
        Ok(())
    }
}

fn overlap_add(synth: &mut FrameSynthesizer, spectrum: &[Complex64], ola: &mut [f64], buf: &mut [f64]) {
    synth.synthesize(spectrum, buf);
    for (o, b) in ola.iter_mut().zip(buf.iter()) {
        *o += b;
    }
}

/// Output of [`process`].
#[derive(Debug)]
pub struct Processed {
    pub output: AudioBuffer,
    pub diagnostics: Diagnostics,
    pub echo: Option<AudioBuffer>,
    /// Wall-clock time of the whole call.
    pub elapsed: Duration,
}

/// Whole-signal processing through [`AecStream`], fed `chunk` samples at a
/// time (`None`: everything in one call).
pub fn process(
    cfg: &PipelineConfig,
    postfilter: Option<Arc<PostFilter>>,
    mic: &AudioBuffer,
    reference: &AudioBuffer,
    chunk: Option<usize>,
    keep_echo: bool,
) -> Result<Processed> {
    let t0 = Instant::now();
    mic.expect_rate(cfg.stft.sample_rate)
        .map_err(|e| e.in_stage(Stage::Input))?;
    reference
        .expect_rate(cfg.stft.sample_rate)
        .map_err(|e| e.in_stage(Stage::Input))?;
    if mic.len() != reference.len() {
        return Err(Error::Contract(format!(
            "microphone has {} samples but reference has {}",
            mic.len(),
            reference.len()
        ))
        .in_stage(Stage::Input));
    }
    if mic.is_empty() {
        return Err(Error::InsufficientData("empty input".into()).in_stage(Stage::Input));
    }
    if chunk == Some(0) {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let mut stream = AecStream::new(cfg.clone(), postfilter)?;
    if keep_echo {
        stream.keep_echo_estimate();
    }
    let step = chunk.unwrap_or(mic.len());
    let mut out = Vec::with_capacity(mic.len());
    for (m, r) in mic.samples.chunks(step).zip(reference.samples.chunks(step)) {
        out.extend(stream.push(m, r)?);
    }
    let fin = stream.finish()?;
    out.extend(fin.tail);
    let rate = mic.sample_rate;
    Ok(Processed {
        output: AudioBuffer::new(rate, out),
        diagnostics: fin.diagnostics,
        echo: fin.echo.map(|e| AudioBuffer::new(rate, e)),
        elapsed: t0.elapsed(),
    })
}

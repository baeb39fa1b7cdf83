//! Real-time-factor measurement on synthetic input, split into the neural
//! post-filter and everything else (delay estimation, alignment, STFT,
//! NLMS, resynthesis).

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::datasim::make_echo;
use crate::error::Result;
use crate::pipeline::{process, PipelineConfig};
use crate::postfilter::PostFilter;

/// Single-thread reference figures measured on other hardware, for context only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceRtf {
    pub total: f64,
    pub postfilter: f64,
    pub front_end: f64,
}

pub const REFERENCE_RTF: ReferenceRtf = ReferenceRtf {
    total: 0.35,
    postfilter: 0.28,
    front_end: 0.07,
};

/// Largest tolerated gap between the component sum and the total.
pub const SPLIT_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub audio_secs: f64,
    pub frames: usize,
    pub wall_secs: f64,
    /// Wall time over audio time for the whole run.
    pub total_rtf: f64,
    pub postfilter_rtf: f64,
    /// Delay estimation, alignment, STFT, NLMS and resynthesis.
    pub front_end_rtf: f64,
    /// `|postfilter + front_end − total| / total`.
    pub split_gap: f64,
    pub split_consistent: bool,
    pub linear_only: bool,
    pub threads: usize,
    pub config_hash: String,
    pub reference: ReferenceRtf,
    pub note: &'static str,
}

/// Far-end noise, its echo through a short decaying path after 10 ms, and
/// a quieter near-end noise.
pub fn synthetic_input(secs: f64, seed: u64) -> (AudioBuffer, AudioBuffer) {
    let n = (secs * SAMPLE_RATE as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let far: Vec<f64> = (0..n).map(|_| rng.random_range(-0.3..0.3)).collect();
    let far = AudioBuffer::new(SAMPLE_RATE, far);
    let path: Vec<f64> = (0..64).map(|k| 0.5 * 0.9f64.powi(k)).collect();
    let mut mic = make_echo(&far, &path, 480, None);
    for v in &mut mic.samples {
        *v += rng.random_range(-0.01..0.01);
    }
    (mic, far)
}

/// Times one pass of the pipeline over `secs` of synthetic audio on the
/// calling thread.
pub fn run_bench(
    cfg: &PipelineConfig,
    postfilter: Option<Arc<PostFilter>>,
    secs: f64,
    seed: u64,
) -> Result<BenchReport> {
    let (mic, far) = synthetic_input(secs, seed);
    let r = process(cfg, postfilter, &mic, &far, Some(cfg.stft.hop), false)?;
    let audio = mic.duration_secs();
    let wall = r.elapsed.as_secs_f64();
    let t = r.diagnostics.times;
    let (pf, fe) = (t.postfilter.as_secs_f64() / audio, t.front_end().as_secs_f64() / audio);
    let total = wall / audio;
    let gap = ((pf + fe) - total).abs() / total;
    Ok(BenchReport {
        audio_secs: audio,
        frames: r.diagnostics.frames(),
        wall_secs: wall,
        total_rtf: total,
        postfilter_rtf: pf,
        front_end_rtf: fe,
        split_gap: gap,
        split_consistent: gap <= SPLIT_TOLERANCE,
        linear_only: cfg.linear_only,
        threads: 1,
        config_hash: cfg.hash(),
        reference: REFERENCE_RTF,
        note: "reference figures (0.35 total = 0.28 post-filter + 0.07 delay estimation and adaptive filter) \
               are single-thread numbers from other hardware, shown for context only",
    })
}

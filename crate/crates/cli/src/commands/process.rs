use std::path::{Path, PathBuf};
use std::sync::Arc;

use aec_core::datasim::{vad_labels, SceneManifest, VAD_FRAME};
use aec_core::pipeline::{process, DelayMode};
use aec_core::postfilter::PostFilter;
use aec_core::tde::DelayEstimate;
use aec_core::wav::{read_wav, write_wav};
use aec_core::{AudioBuffer, Error, SAMPLE_RATE};
use anyhow::Context;
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;

use super::{emit_json, FormatArg};
use crate::config::{file_hash, CliConfig, Override};
use crate::ConfigArgs;

#[derive(Args, Debug)]
pub struct ProcessArgs {
    /// Microphone WAV.
    #[arg(long, value_name = "FILE", required_unless_present = "scenes", requires_all = ["reference", "out"])]
    mic: Option<PathBuf>,
    /// Far-end reference WAV.
    #[arg(long = "ref", value_name = "FILE")]
    reference: Option<PathBuf>,
    /// Output WAV.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Scene manifest: process every scene's microphone and reference.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["mic", "reference", "out", "echo_truth"], requires = "out_dir")]
    scenes: Option<PathBuf>,
    /// Output directory for batch mode; files are named `{scene}_enhanced.wav`.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// Run report path (default: stdout, or `report.json` in batch mode).
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Echo component of the microphone; enables ERLE on far-end-active blocks.
    #[arg(long, value_name = "FILE")]
    echo_truth: Option<PathBuf>,
    /// Feed the stream this many samples at a time.
    #[arg(long)]
    chunk: Option<usize>,
    /// Align with a known bulk delay in samples instead of tracking.
    #[arg(long)]
    delay: Option<usize>,
    /// Worker threads for batch mode.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, value_enum, default_value_t)]
    format: FormatArg,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Debug, Serialize)]
struct DelayInfo {
    mode: DelayMode,
    /// Alignment applied on the last frame.
    applied_final: usize,
    estimate: Option<DelayEstimate>,
    updates: usize,
}

#[derive(Debug, Serialize)]
struct ErleInfo {
    /// ERLE over the blocks where the true echo is active.
    fe_active_db: f64,
    active_blocks: usize,
    total_blocks: usize,
}

#[derive(Debug, Serialize)]
struct Rtf {
    total: f64,
    postfilter: f64,
    front_end: f64,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    name: Option<String>,
    mic: PathBuf,
    reference: PathBuf,
    output: PathBuf,
    samples: usize,
    frames: usize,
    delay: DelayInfo,
    erle: Option<ErleInfo>,
    vad_mean: Option<f64>,
    rtf: Rtf,
}

#[derive(Debug, Serialize)]
struct WeightsInfo {
    path: PathBuf,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Report<T> {
    config_hash: String,
    pipeline_hash: String,
    weights: Option<WeightsInfo>,
    overrides: Vec<Override>,
    #[serde(flatten)]
    body: T,
}

#[derive(Debug, Serialize)]
struct Batch {
    threads: usize,
    scenes: Vec<RunSummary>,
    mean_erle_db: Option<f64>,
}

/// ERLE over the blocks where `echo` is within the activity floor of its
/// loudest block.
fn fe_active_erle(mic: &AudioBuffer, out: &AudioBuffer, echo: &AudioBuffer) -> Option<ErleInfo> {
    let labels = vad_labels(&echo.samples);
    let (mut pm, mut po, mut active) = (0.0, 0.0, 0);
    for (b, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        active += 1;
        let r = b * VAD_FRAME..((b + 1) * VAD_FRAME).min(mic.len());
        pm += mic.samples[r.clone()].iter().map(|v| v * v).sum::<f64>();
        po += out.samples[r].iter().map(|v| v * v).sum::<f64>();
    }
    (active > 0 && pm > 0.0).then(|| ErleInfo {
        fe_active_db: 10.0 * (pm / po.max(f64::MIN_POSITIVE)).log10(),
        active_blocks: active,
        total_blocks: labels.len(),
    })
}

struct Job<'a> {
    name: Option<String>,
    mic: PathBuf,
    reference: PathBuf,
    out: PathBuf,
    echo: Option<PathBuf>,
    cfg: &'a CliConfig,
    pf: Option<Arc<PostFilter>>,
    chunk: Option<usize>,
    format: FormatArg,
}

fn run_job(job: Job) -> anyhow::Result<RunSummary> {
    let label = job.name.clone().unwrap_or_else(|| job.mic.display().to_string());
    let mic = read_wav(&job.mic, Some(SAMPLE_RATE)).with_context(|| format!("reading {}", job.mic.display()))?;
    let far =
        read_wav(&job.reference, Some(SAMPLE_RATE)).with_context(|| format!("reading {}", job.reference.display()))?;
    let echo = match &job.echo {
        Some(p) => {
            let e = read_wav(p, Some(SAMPLE_RATE)).with_context(|| format!("reading {}", p.display()))?;
            if e.len() != mic.len() {
                return Err(Error::Contract(format!(
                    "echo truth has {} samples but the microphone has {}",
                    e.len(),
                    mic.len()
                ))
                .into());
            }
            Some(e)
        }
        None => None,
    };
    let r = process(&job.cfg.pipeline, job.pf, &mic, &far, job.chunk, false)
        .with_context(|| format!("processing {label}"))?;
    if !r.output.samples.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("output of {label}")).into());
    }
    write_wav(&job.out, &r.output, job.format.into()).with_context(|| format!("writing {}", job.out.display()))?;

    let d = &r.diagnostics;
    let secs = mic.duration_secs();
    let t = d.times;
    Ok(RunSummary {
        name: job.name,
        mic: job.mic,
        reference: job.reference,
        output: job.out,
        samples: mic.len(),
        frames: d.frames(),
        delay: DelayInfo {
            mode: job.cfg.pipeline.delay,
            applied_final: d.delay.last().copied().unwrap_or(0),
            estimate: d.final_estimate(),
            updates: d.delay_updates.len(),
        },
        erle: echo.as_ref().and_then(|e| fe_active_erle(&mic, &r.output, e)),
        vad_mean: (!d.vad.is_empty()).then(|| d.vad.iter().sum::<f64>() / d.vad.len() as f64),
        rtf: Rtf {
            total: r.elapsed.as_secs_f64() / secs,
            postfilter: t.postfilter.as_secs_f64() / secs,
            front_end: t.front_end().as_secs_f64() / secs,
        },
    })
}

fn report<T>(cfg: &CliConfig, overrides: Vec<Override>, body: T) -> anyhow::Result<Report<T>> {
    let weights = match (&cfg.weights, cfg.pipeline.linear_only) {
        (Some(p), false) => Some(WeightsInfo {
            path: p.clone(),
            sha256: file_hash(p)?,
        }),
        _ => None,
    };
    Ok(Report {
        config_hash: cfg.hash(),
        pipeline_hash: cfg.pipeline.hash(),
        weights,
        overrides,
        body,
    })
}

pub fn run(args: ProcessArgs) -> anyhow::Result<()> {
    let mut extra = Vec::new();
    if let Some(d) = args.delay {
        extra.push(format!("pipeline.delay={{\"fixed\":{d}}}"));
    }
    if let Some(t) = args.threads {
        extra.push(format!("threads={t}"));
    }
    let loaded = args.config.resolve(&extra)?;
    let cfg = &loaded.config;
    let pf = cfg.postfilter()?;

    let Some(manifest_path) = &args.scenes else {
        let summary = run_job(Job {
            name: None,
            mic: args.mic.expect("clap enforces --mic"),
            reference: args.reference.expect("clap enforces --ref"),
            out: args.out.expect("clap enforces --out"),
            echo: args.echo_truth,
            cfg,
            pf,
            chunk: args.chunk,
            format: args.format,
        })?;
        return emit_json(&report(cfg, loaded.overrides, summary)?, args.report.as_deref());
    };

    let manifest =
        SceneManifest::load(manifest_path).with_context(|| format!("loading {}", manifest_path.display()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let out_dir = args.out_dir.expect("clap enforces --out-dir");
    std::fs::create_dir_all(&out_dir).map_err(Error::from)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build()?;
    let scenes = pool.install(|| {
        manifest
            .scenes
            .par_iter()
            .map(|rec| {
                run_job(Job {
                    name: Some(rec.name.clone()),
                    mic: base.join(&rec.files.mic),
                    reference: base.join(&rec.files.far),
                    out: out_dir.join(format!("{}_enhanced.wav", rec.name)),
                    echo: Some(base.join(&rec.files.echo)),
                    cfg,
                    pf: pf.clone(),
                    chunk: args.chunk,
                    format: args.format,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    let erles: Vec<f64> = scenes
        .iter()
        .filter_map(|s| s.erle.as_ref().map(|e| e.fe_active_db))
        .collect();
    let body = Batch {
        threads: cfg.threads,
        mean_erle_db: (!erles.is_empty()).then(|| erles.iter().sum::<f64>() / erles.len() as f64),
        scenes,
    };
    let path = args.report.unwrap_or_else(|| out_dir.join("report.json"));
    emit_json(&report(cfg, loaded.overrides, body)?, Some(&path))
}

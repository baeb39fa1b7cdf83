use std::path::PathBuf;

use aec_core::nn::WeightManifest;
use aec_core::postfilter::PostFilter;
use aec_core::rtf::{run_bench, BenchReport};
use aec_core::tde::estimate_delay;
use aec_core::wav::read_wav;
use aec_core::{Error, SAMPLE_RATE};
use anyhow::Context;
use clap::Args;
use serde::Serialize;

use super::emit_json;
use crate::config::{file_hash, Override};
use crate::ConfigArgs;

#[derive(Args, Debug)]
pub struct DelayArgs {
    #[arg(long, value_name = "FILE")]
    mic: PathBuf,
    #[arg(long = "ref", value_name = "FILE")]
    reference: PathBuf,
    /// Print JSON instead of one line of text.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Serialize)]
struct DelayOut {
    delay: usize,
    delay_ms: f64,
    confidence: f64,
    config_hash: String,
}

pub fn delay(args: DelayArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve(&[])?.config;
    let mic = read_wav(&args.mic, Some(SAMPLE_RATE)).with_context(|| format!("reading {}", args.mic.display()))?;
    let far = read_wav(&args.reference, Some(SAMPLE_RATE))
        .with_context(|| format!("reading {}", args.reference.display()))?;
    let est = estimate_delay(&mic, &far, &cfg.pipeline.tde)?;
    let out = DelayOut {
        delay: est.delay,
        delay_ms: est.delay_ms(SAMPLE_RATE),
        confidence: est.confidence,
        config_hash: cfg.hash(),
    };
    if args.json {
        return emit_json(&out, None);
    }
    println!(
        "delay {} samples ({:.2} ms), confidence {:.3}",
        out.delay, out.delay_ms, out.confidence
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Seconds of synthetic audio.
    #[arg(long, default_value_t = 10.0)]
    secs: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only single-threaded runs are measured.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Serialize)]
struct BenchOut {
    preset: aec_core::postfilter::Preset,
    #[serde(flatten)]
    report: BenchReport,
    overrides: Vec<Override>,
}

pub fn bench(args: BenchArgs) -> anyhow::Result<()> {
    if args.threads != 1 {
        return Err(Error::Config("bench measures single-thread runs only (--threads 1)".into()).into());
    }
    if !(args.secs > 0.0) {
        return Err(Error::Config("--secs must be positive".into()).into());
    }
    let c = &args.config;
    // Timing does not depend on the weight values, so seeded ones do.
    let extra = if c.weights.is_none() && c.seed_weights.is_none() && !c.linear_only {
        vec!["seed_weights=0".to_string()]
    } else {
        Vec::new()
    };
    let loaded = c.resolve(&extra)?;
    let cfg = &loaded.config;
    let report = run_bench(&cfg.pipeline, cfg.postfilter()?, args.secs, args.seed)?;
    emit_json(
        &BenchOut {
            preset: cfg.preset,
            report,
            overrides: loaded.overrides,
        },
        None,
    )
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Accept manifests carrying tensors the graph does not use.
    #[arg(long)]
    allow_unused: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Serialize)]
struct ValidateOut {
    weights: PathBuf,
    sha256: String,
    tensors: usize,
    params: usize,
    model: String,
    manifest_config_hash: String,
    config_hash: String,
    config_hash_matches: bool,
}

pub fn validate_weights(args: ValidateArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve(&[])?.config;
    let path = cfg
        .weights
        .clone()
        .ok_or_else(|| Error::Config("validate-weights needs --weights FILE".into()))?;
    let manifest = WeightManifest::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let pf = PostFilter::from_manifest(cfg.pipeline.postfilter.clone(), &manifest, args.allow_unused)
        .with_context(|| format!("binding {}", path.display()))?;
    let expected = pf.config().hash();
    emit_json(
        &ValidateOut {
            sha256: file_hash(&path)?,
            weights: path,
            tensors: pf.specs().len(),
            params: pf.param_count(),
            model: manifest.metadata.model.clone(),
            config_hash_matches: manifest.metadata.config_hash == expected,
            manifest_config_hash: manifest.metadata.config_hash.clone(),
            config_hash: expected,
        },
        None,
    )
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    /// Print the full description (tensors and layers) as JSON.
    #[arg(long)]
    json: bool,
    /// Also list every layer.
    #[arg(long)]
    layers: bool,
    /// Write the graph definition JSON here.
    #[arg(long, value_name = "FILE")]
    graph: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn describe(args: DescribeArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve(&[])?.config;
    // Shapes and counts only; the values are irrelevant here.
    let pf = PostFilter::seeded(cfg.pipeline.postfilter.clone(), 0)?;
    if let Some(p) = &args.graph {
        std::fs::write(p, pf.graph_json()?).map_err(Error::from)?;
    }
    let d = pf.describe();
    if args.json {
        return emit_json(&d, None);
    }
    println!(
        "model {} ({:?} preset), config hash {}",
        d.model, cfg.preset, d.config_hash
    );
    println!(
        "parameters {} (WBPF {}, HBPF {})",
        d.param_count, d.wbpf_params, d.hbpf_params
    );
    if let Some(dev) = d.reference_deviation {
        println!(
            "reference {:.2}M for the large model: {:+.1}%",
            d.reference_param_count / 1e6,
            100.0 * dev
        );
    }
    println!("{} tensors, {} layers", d.tensors.len(), d.layers.len());
    if args.layers {
        for l in &d.layers {
            println!("  {}", serde_json::to_string(l)?);
        }
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct InitArgs {
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Serialize)]
struct InitOut {
    out: PathBuf,
    seed: u64,
    tensors: usize,
    params: usize,
    config_hash: String,
    sha256: String,
}

pub fn init_weights(args: InitArgs) -> anyhow::Result<()> {
    let cfg = args.config.resolve(&[])?.config;
    let (pf, manifest) = PostFilter::seed_manifest(cfg.pipeline.postfilter.clone(), args.seed)?;
    manifest.save(&args.out)?;
    emit_json(
        &InitOut {
            sha256: file_hash(&args.out)?,
            out: args.out,
            seed: args.seed,
            tensors: manifest.len(),
            params: pf.param_count(),
            config_hash: pf.config().hash(),
        },
        None,
    )
}

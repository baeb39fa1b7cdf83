use std::path::PathBuf;

use aec_core::datasim::{mix_scene, Corpus, Scenario, SceneManifest, SceneRanges, SceneSpec};
use aec_core::Error;
use anyhow::Context;
use clap::Args;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use super::emit_json;

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Number of scenes.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// JSON sampling ranges; values outside the recipe bounds are clamped.
    #[arg(long, value_name = "FILE")]
    ranges: Option<PathBuf>,
    /// Corpus manifest `{"speech": [...], "noise": [...]}`; seeded synthetic
    /// material is used otherwise.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Scene length in seconds.
    #[arg(long)]
    secs: Option<f64>,
    /// Restrict to these scenarios (ST-NE, ST-FE, DT). Repeatable.
    #[arg(long = "scenario", value_parser = parse_scenario)]
    scenarios: Vec<Scenario>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    serde_json::from_value(Value::String(s.to_uppercase()))
        .map_err(|_| format!("unknown scenario {s:?} (ST-NE, ST-FE, DT)"))
}

/// Seed of scene `i` in a run seeded with `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)
}

#[derive(Debug, Serialize)]
struct Summary {
    manifest: PathBuf,
    scenes: usize,
    seed: u64,
    corpus: String,
    ranges: SceneRanges,
    /// Range fields changed by clamping to the recipe bounds.
    clamped: Vec<String>,
}

fn load_ranges(path: Option<&PathBuf>) -> Result<SceneRanges, Error> {
    let Some(p) = path else {
        return Ok(SceneRanges::default());
    };
    let bytes = std::fs::read(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
}

pub fn run(args: SimulateArgs) -> anyhow::Result<()> {
    if args.n == 0 || args.threads == 0 {
        return Err(Error::Config("--n and --threads must be at least 1".into()).into());
    }
    let mut ranges = load_ranges(args.ranges.as_ref())?;
    if let Some(s) = args.secs {
        ranges.secs = s;
    }
    if !args.scenarios.is_empty() {
        ranges.scenarios = args.scenarios.clone();
    }
    let requested = serde_json::to_value(&ranges)?;
    let ranges = ranges.clamped();
    ranges.validate()?;
    let clamped = match (requested, serde_json::to_value(&ranges)?) {
        (Value::Object(a), Value::Object(b)) => a.keys().filter(|k| a[*k] != b[*k]).cloned().collect(),
        _ => Vec::new(),
    };

    let (corpus, corpus_name) = match &args.corpus {
        Some(p) => (
            Corpus::from_manifest(p).with_context(|| format!("loading corpus {}", p.display()))?,
            p.display().to_string(),
        ),
        None => (Corpus::synthetic(args.seed, 8, 4, ranges.secs), "synthetic".to_string()),
    };

    std::fs::create_dir_all(&args.out_dir).map_err(Error::from)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(args.threads).build()?;
    let records = pool.install(|| {
        (0..args.n)
            .into_par_iter()
            .map(|i| -> anyhow::Result<_> {
                let spec = SceneSpec::sample(scene_seed(args.seed, i), &ranges)?;
                let scene = mix_scene(&spec, &corpus).with_context(|| format!("mixing scene {i}"))?;
                Ok(scene.write(&args.out_dir, &format!("scene{i:04}"))?)
            })
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    let manifest = args.out_dir.join("manifest.json");
    SceneManifest::new(records).save(&manifest)?;
    emit_json(
        &Summary {
            manifest,
            scenes: args.n,
            seed: args.seed,
            corpus: corpus_name,
            ranges,
            clamped,
        },
        None,
    )
}

use std::path::{Path, PathBuf};

use aec_core::datasim::{Scenario, SceneManifest, SceneRecord};
use aec_core::dsp::{stft, StftConfig};
use aec_core::losses::{loss_echo_weighted, loss_plcpa, LossWeights};
use aec_core::metrics::{erle, si_sdr};
use aec_core::wav::read_wav;
use aec_core::{AudioBuffer, Error, SAMPLE_RATE};
use anyhow::Context;
use clap::Args;
use serde::Serialize;

use super::emit_json;

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Scene manifest written by `simulate`.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Directory holding `{scene}{suffix}.wav` outputs.
    #[arg(long, value_name = "DIR", required_unless_present = "check")]
    enhanced_dir: Option<PathBuf>,
    #[arg(long, default_value = "_enhanced")]
    suffix: String,
    /// Re-check the mixing identity of every scene.
    #[arg(long)]
    check: bool,
    /// Also write the per-scene table as CSV.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Write the JSON result here instead of stdout.
    #[arg(long, value_name = "FILE")]
    json: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Row {
    name: String,
    scenario: Scenario,
    /// Far-end single talk only.
    erle_db: Option<f64>,
    /// Against the near-end speech; double talk and near-end single talk.
    si_sdr_db: Option<f64>,
    si_sdr_capped: Option<bool>,
    plcpa: Option<f64>,
    echo_weighted: Option<f64>,
    identity_ok: Option<bool>,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    scenes: usize,
    mean_erle_db: Option<f64>,
    mean_si_sdr_db: Option<f64>,
    mean_plcpa: Option<f64>,
    mean_echo_weighted: Option<f64>,
    identity_failures: Option<usize>,
}

#[derive(Debug, Serialize)]
struct Evaluation {
    aggregate: Aggregate,
    scenes: Vec<Row>,
}

fn mean(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn score(rec: &SceneRecord, base: &Path, enhanced: &AudioBuffer, row: &mut Row) -> anyhow::Result<()> {
    let scene = rec.load(base).with_context(|| format!("loading scene {}", rec.name))?;
    if enhanced.len() != scene.mic.len() {
        return Err(Error::Contract(format!(
            "{}: enhanced output has {} samples, scene has {}",
            rec.name,
            enhanced.len(),
            scene.mic.len()
        ))
        .into());
    }
    if let Some(seg) = scene.erle_segment() {
        row.erle_db = Some(erle(&scene.mic, enhanced, seg)?);
    } else {
        let s = si_sdr(&enhanced.samples, &scene.near.samples)?;
        row.si_sdr_db = Some(s.db);
        row.si_sdr_capped = Some(s.capped);
    }
    let w = LossWeights::default();
    let sc = StftConfig::default();
    let est = stft(enhanced, &sc)?;
    let target = stft(&scene.near, &sc)?;
    let echo = stft(&scene.echo, &sc)?;
    row.plcpa = Some(loss_plcpa(&est, &target, w.plcpa_p)?.value);
    row.echo_weighted = Some(loss_echo_weighted(&est, &target, &echo, w.plcpa_p, w.echo_weight_beta)?.value);
    Ok(())
}

pub fn run(args: EvaluateArgs) -> anyhow::Result<()> {
    let manifest =
        SceneManifest::load(&args.manifest).with_context(|| format!("loading {}", args.manifest.display()))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::with_capacity(manifest.scenes.len());
    let mut failures = 0;
    for rec in &manifest.scenes {
        let mut row = Row {
            name: rec.name.clone(),
            scenario: rec.spec.scenario,
            erle_db: None,
            si_sdr_db: None,
            si_sdr_capped: None,
            plcpa: None,
            echo_weighted: None,
            identity_ok: None,
        };
        if args.check {
            let ok = rec.load(base).and_then(|s| s.check_identity()).is_ok();
            failures += usize::from(!ok);
            row.identity_ok = Some(ok);
        }
        if let Some(dir) = &args.enhanced_dir {
            let path = dir.join(format!("{}{}.wav", rec.name, args.suffix));
            let enhanced = read_wav(&path, Some(SAMPLE_RATE)).with_context(|| format!("reading {}", path.display()))?;
            score(rec, base, &enhanced, &mut row)?;
        }
        rows.push(row);
    }

    if let Some(p) = &args.csv {
        let mut w = csv::Writer::from_path(p).with_context(|| format!("writing {}", p.display()))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush().map_err(Error::from)?;
    }
    let aggregate = Aggregate {
        scenes: rows.len(),
        mean_erle_db: mean(rows.iter().map(|r| r.erle_db)),
        mean_si_sdr_db: mean(rows.iter().map(|r| r.si_sdr_db)),
        mean_plcpa: mean(rows.iter().map(|r| r.plcpa)),
        mean_echo_weighted: mean(rows.iter().map(|r| r.echo_weighted)),
        identity_failures: args.check.then_some(failures),
    };
    emit_json(
        &Evaluation {
            aggregate,
            scenes: rows,
        },
        args.json.as_deref(),
    )?;
    if failures > 0 {
        return Err(Error::Contract(format!("{failures} scene(s) break d = s + r + v + z")).into());
    }
    Ok(())
}

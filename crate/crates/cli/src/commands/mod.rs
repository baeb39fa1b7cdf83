pub mod evaluate;
pub mod info;
pub mod process;
pub mod simulate;

use std::io::Write;
use std::path::Path;

use aec_core::wav::WavFormat;
use clap::ValueEnum;
use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum FormatArg {
    #[default]
    Float32,
    Pcm16,
}

impl From<FormatArg> for WavFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Float32 => WavFormat::Float32,
            FormatArg::Pcm16 => WavFormat::Pcm16,
        }
    }
}

/// Pretty JSON to `path`, or to stdout when `path` is `None`.
pub fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => std::fs::write(p, text + "\n").map_err(aec_core::Error::from)?,
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{text}") {
                // A closed pipe (`| head`) is not a failure of the run.
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r.map_err(aec_core::Error::from)?,
            }
        }
    }
    Ok(())
}

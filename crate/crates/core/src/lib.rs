pub mod audio;
pub mod datasim;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nlms;
pub mod nn;
pub mod pipeline;
pub mod postfilter;
pub mod rtf;
pub mod tde;
pub mod wav;

pub use audio::{AudioBuffer, SAMPLE_RATE};
pub use error::{Error, Result, Stage};
pub use pipeline::{process, AecStream, DelayMode, Diagnostics, PipelineConfig, Processed, StageTimes};

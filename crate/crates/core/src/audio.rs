use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only rate the pipeline runs at.
pub const SAMPLE_RATE: u32 = 48_000;

/// Mono sample sequence at a declared sample rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioBuffer {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioBuffer {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Self {
        Self { sample_rate, samples }
    }

    pub fn zeros(sample_rate: u32, len: usize) -> Self {
        Self::new(sample_rate, vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn expect_rate(&self, expected: u32) -> Result<()> {
        if self.sample_rate == expected {
            Ok(())
        } else {
            Err(Error::SampleRate {
                expected,
                actual: self.sample_rate,
            })
        }
    }

    pub fn power(&self) -> f64 {
        mean_square(&self.samples)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()))
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::new(self.sample_rate, self.samples.iter().map(|s| s * gain).collect())
    }

    /// Delays by `delay` samples with zero fill, keeping the length.
    pub fn delayed(&self, delay: usize) -> Self {
        let mut out = vec![0.0; self.len()];
        if delay < self.len() {
            out[delay..].copy_from_slice(&self.samples[..self.len() - delay]);
        }
        Self::new(self.sample_rate, out)
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

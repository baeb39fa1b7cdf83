//! Source material for scene mixing: a directory of WAV clips described by
//! a manifest, or a small seeded synthetic stand-in.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::wav::read_wav;

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub speech: Vec<AudioBuffer>,
    pub noise: Vec<AudioBuffer>,
}

/// `{"speech": [...], "noise": [...]}`, paths relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub speech: Vec<PathBuf>,
    pub noise: Vec<PathBuf>,
}

impl Corpus {
    pub fn validate(&self) -> Result<()> {
        if self.speech.is_empty() || self.noise.is_empty() {
            return Err(Error::InsufficientData(format!(
                "corpus needs speech and noise clips, has {} and {}",
                self.speech.len(),
                self.noise.len()
            )));
        }
        for c in self.speech.iter().chain(&self.noise) {
            c.expect_rate(SAMPLE_RATE)?;
        }
        Ok(())
    }

    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let m: CorpusManifest = serde_json::from_slice(&std::fs::read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let load = |list: &[PathBuf]| -> Result<Vec<AudioBuffer>> {
            list.iter().map(|p| read_wav(base.join(p), Some(SAMPLE_RATE))).collect()
        };
        let c = Self {
            speech: load(&m.speech)?,
            noise: load(&m.noise)?,
        };
        c.validate()?;
        Ok(c)
    }

    /// Seeded speech and noise stand-ins, `secs` long each.
    pub fn synthetic(seed: u64, n_speech: usize, n_noise: usize, secs: f64) -> Self {
        let len = (secs * SAMPLE_RATE as f64) as usize;
        let speech = (0..n_speech)
            .map(|i| AudioBuffer::new(SAMPLE_RATE, babble(seed.wrapping_mul(31).wrapping_add(i as u64), len)))
            .collect();
        let noise = (0..n_noise)
            .map(|i| {
                AudioBuffer::new(
                    SAMPLE_RATE,
                    coloured_noise(seed.wrapping_mul(37).wrapping_add(i as u64), len),
                )
            })
            .collect();
        Self { speech, noise }
    }
}

/// Speech-like signal: voiced syllables (gliding harmonic stack with a
/// spectral tilt), fricative bursts reaching the high band, and pauses.
fn babble(seed: u64, len: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eec);
    let f0_base = rng.random_range(90.0..240.0);
    let mut out = vec![0.0; len];
    let mut t = 0usize;
    let mut phase = 0.0f64;
    while t < len {
        let pause = if rng.random_bool(0.15) {
            rng.random_range(0.4..1.0)
        } else {
            rng.random_range(0.04..0.2)
        };
        t += (pause * fs) as usize;
        let dur = (rng.random_range(0.12..0.45) * fs) as usize;
        let fricative = rng.random_bool(0.25);
        let glide = rng.random_range(-0.3..0.3);
        let amp = rng.random_range(0.2..0.6);
        let mut lp = 0.0;
        for i in 0..dur {
            let n = t + i;
            if n >= len {
                break;
            }
            let u = i as f64 / dur as f64;
            let env = amp * (PI * u).sin().powi(2);
            let v = if fricative {
                // First difference of white noise tilts the spectrum upwards.
                let w: f64 = rng.random_range(-1.0..1.0);
                let hp = w - lp;
                lp = w;
                0.4 * hp
            } else {
                let f0 = f0_base * (1.0 + glide * u);
                phase = (phase + 2.0 * PI * f0 / fs) % (2.0 * PI);
                // sin(k·phase) by the Chebyshev recurrence.
                let c2 = 2.0 * phase.cos();
                let (mut prev, mut cur) = (0.0, phase.sin());
                let mut s = 0.0;
                let mut k = 1;
                while (k as f64) * f0 < 20_000.0 {
                    let formant = 1.0 + 2.0 * (-((k as f64 * f0 - 700.0) / 300.0).powi(2)).exp();
                    s += formant * cur / k as f64;
                    (prev, cur) = (cur, c2 * cur - prev);
                    k += 1;
                }
                0.3 * s
            };
            out[n] += env * v;
        }
        t += dur;
    }
    out
}

/// One-pole low-passed white noise plus a faint mains-like hum.
fn coloured_noise(seed: u64, len: usize) -> Vec<f64> {
    let fs = SAMPLE_RATE as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x401e);
    let a = rng.random_range(0.0..0.95);
    let hum = rng.random_range(0.0..0.05);
    let f_hum = if rng.random_bool(0.5) { 50.0 } else { 60.0 };
    let mut y = 0.0;
    (0..len)
        .map(|n| {
            let w: f64 = rng.random_range(-1.0..1.0);
            y = a * y + (1.0 - a) * w;
            0.3 * y + hum * (2.0 * PI * f_hum * n as f64 / fs).sin()
        })
        .collect()
}

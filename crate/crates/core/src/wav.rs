//! Mono WAV reading and writing (16-bit PCM and 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use serde::{Deserialize, Serialize};

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

const PCM16_SCALE: f64 = 32768.0;

/// Reads a mono file and checks its rate against `expected_rate`, if given.
pub fn read_wav(path: impl AsRef<Path>, expected_rate: Option<u32>) -> Result<AudioBuffer> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Contract(format!(
            "{}: expected a mono file, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / PCM16_SCALE))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(Error::Contract(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    let buf = AudioBuffer::new(spec.sample_rate, samples);
    if let Some(rate) = expected_rate {
        buf.expect_rate(rate)?;
    }
    Ok(buf)
}

/// Writes `buf` as a mono file. PCM values are rounded and saturated.
pub fn write_wav(path: impl AsRef<Path>, buf: &AudioBuffer, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: buf.sample_rate,
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut w = WavWriter::create(path, spec)?;
    match format {
        WavFormat::Float32 => {
            for &s in &buf.samples {
                w.write_sample(s as f32)?;
            }
        }
        WavFormat::Pcm16 => {
            for &s in &buf.samples {
                let q = (s * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64);
                w.write_sample(q as i16)?;
            }
        }
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (0..1000).map(|i| ((i as f32 * 0.013).sin() * 0.7) as f64).collect();
        let buf = AudioBuffer::new(48_000, x);
        write_wav(&p, &buf, WavFormat::Float32).unwrap();
        let back = read_wav(&p, Some(48_000)).unwrap();
        assert_eq!(back, buf);
        write_wav(&p, &back, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p, None).unwrap(), buf);
    }

    #[test]
    fn pcm16_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let x: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.0071).sin() * 0.99).collect();
        let buf = AudioBuffer::new(48_000, x.clone());
        write_wav(&p, &buf, WavFormat::Pcm16).unwrap();
        let back = read_wav(&p, Some(48_000)).unwrap();
        let lsb = 1.0 / PCM16_SCALE;
        assert!(back.samples.iter().zip(&x).all(|(a, b)| (a - b).abs() <= lsb));
    }

    #[test]
    fn wrong_rate_names_both_rates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        write_wav(&p, &AudioBuffer::zeros(16_000, 10), WavFormat::Float32).unwrap();
        let err = read_wav(&p, Some(48_000)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("48000") && msg.contains("16000"), "{msg}");
    }
}

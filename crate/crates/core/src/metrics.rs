//! Evaluation metrics.

use std::ops::Range;

use serde::Serialize;

use crate::audio::AudioBuffer;
use crate::error::{Error, Result};

/// Returned in place of unbounded SI-SDR values.
pub const SI_SDR_CAP_DB: f64 = 60.0;

/// Echo return loss enhancement over `segment`, in dB:
/// `10 log10(Σ mic² / Σ out²)`.
pub fn erle(mic: &AudioBuffer, out: &AudioBuffer, segment: Range<usize>) -> Result<f64> {
    if segment.end > mic.len() || segment.end > out.len() || segment.start >= segment.end {
        return Err(Error::Contract(format!(
            "ERLE segment {segment:?} outside signals of {} and {} samples",
            mic.len(),
            out.len()
        )));
    }
    let pm: f64 = mic.samples[segment.clone()].iter().map(|v| v * v).sum();
    let po: f64 = out.samples[segment].iter().map(|v| v * v).sum();
    if pm == 0.0 {
        return Err(Error::InsufficientData("ERLE segment has a silent microphone".into()));
    }
    Ok(10.0 * (pm / po.max(f64::MIN_POSITIVE)).log10())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SiSdr {
    pub db: f64,
    /// The true value exceeded the cap (or was infinite).
    pub capped: bool,
}

/// Scale-invariant signal-to-distortion ratio of `est` against `reference`.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<SiSdr> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::Contract("SI-SDR needs equal, non-empty signals".into()));
    }
    let rr: f64 = reference.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::InsufficientData("SI-SDR reference is silent".into()));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / rr;
    let (mut pt, mut pn) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r;
        pt += t * t;
        pn += (e - t) * (e - t);
    }
    let db = if pn == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (pt / pn).log10()
    };
    Ok(if db > SI_SDR_CAP_DB {
        SiSdr {
            db: SI_SDR_CAP_DB,
            capped: true,
        }
    } else {
        SiSdr { db, capped: false }
    })
}

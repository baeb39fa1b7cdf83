//! Room impulse responses: image-source early part plus a seeded
//! exponentially decaying noise tail.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Image sources are summed up to this long after the direct path; the
/// noise tail fades in over the same span and carries everything later.
pub const EARLY_SECS: f64 = 0.05;

/// Half-width of the windowed-sinc fractional delay, in samples.
const SINC_HALF: isize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Room {
    pub dims: [f64; 3],
    pub rt60: f64,
}

impl Room {
    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Uniform wall reflection coefficient from Sabine's formula.
    pub fn reflection(&self) -> Result<f64> {
        let alpha = 0.161 * self.volume() / (self.surface() * self.rt60);
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Geometry(format!(
                "rt60 {} s is out of reach for a {:?} m room",
                self.rt60, self.dims
            )));
        }
        Ok((1.0 - alpha).sqrt())
    }

    pub fn check_inside(&self, p: [f64; 3], what: &str) -> Result<()> {
        if p.iter().zip(&self.dims).all(|(c, d)| *c > 0.0 && c < d) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{what} {p:?} is outside the room {:?}",
                self.dims
            )))
        }
    }
}

pub fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Direct-path propagation delay in samples.
pub fn direct_delay(source: [f64; 3], receiver: [f64; 3], sample_rate: u32) -> f64 {
    distance(source, receiver) / SPEED_OF_SOUND * sample_rate as f64
}

fn add_fractional(h: &mut [f64], at: f64, gain: f64) {
    let centre = at.round() as isize;
    for k in centre - SINC_HALF..=centre + SINC_HALF {
        if k < 0 || k as usize >= h.len() {
            continue;
        }
        let t = k as f64 - at;
        let sinc = if t.abs() < 1e-12 {
            1.0
        } else {
            (PI * t).sin() / (PI * t)
        };
        let win = 0.5 * (1.0 + (PI * t / (SINC_HALF as f64 + 1.0)).cos());
        h[k as usize] += gain * sinc * win;
    }
}

/// Impulse response from `source` to `receiver`, normalised to unit energy.
/// Length is `(direct + 1.2·rt60)·rate` samples.
pub fn gen_rir(room: &Room, source: [f64; 3], receiver: [f64; 3], sample_rate: u32, seed: u64) -> Result<Vec<f64>> {
    if room.dims.iter().any(|d| !(*d > 0.0)) || !(room.rt60 > 0.0) {
        return Err(Error::Geometry(format!(
            "room {:?} with rt60 {} is not a valid geometry",
            room.dims, room.rt60
        )));
    }
    room.check_inside(source, "source")?;
    room.check_inside(receiver, "receiver")?;
    let beta = room.reflection()?;
    let fs = sample_rate as f64;
    let t_dir = distance(source, receiver) / SPEED_OF_SOUND;
    let t_x = t_dir + EARLY_SECS;
    let len = ((t_dir + 1.2 * room.rt60) * fs).ceil() as usize + SINC_HALF as usize;
    let mut h = vec![0.0; len];

    let reach = SPEED_OF_SOUND * t_x;
    let n_max: Vec<i64> = room
        .dims
        .iter()
        .map(|l| (reach / (2.0 * l)).ceil() as i64 + 1)
        .collect();
    for nx in -n_max[0]..=n_max[0] {
        for ny in -n_max[1]..=n_max[1] {
            for nz in -n_max[2]..=n_max[2] {
                for q in 0..8u32 {
                    let n = [nx, ny, nz];
                    let mut img = [0.0; 3];
                    let mut order = 0;
                    for a in 0..3 {
                        let qa = ((q >> a) & 1) as i64;
                        img[a] = (1 - 2 * qa) as f64 * source[a] + 2.0 * n[a] as f64 * room.dims[a];
                        order += (n[a] - qa).abs() + n[a].abs();
                    }
                    let r = distance(img, receiver);
                    let t = r / SPEED_OF_SOUND;
                    if t >= t_x {
                        continue;
                    }
                    let gain = beta.powi(order as i32) / (4.0 * PI * r.max(1e-3));
                    add_fractional(&mut h, t * fs, gain);
                }
            }
        }
    }

    // Tail: unit-variance noise under exp(-k t), raised-cosine fade-in
    // from the direct path to t_x, level matched to the last 10 ms of
    // image-source energy.
    let k = 3.0 * 10f64.ln() / room.rt60;
    let (i_dir, i_x) = ((t_dir * fs) as usize, (t_x * fs) as usize);
    let w0 = i_x.saturating_sub((0.01 * fs) as usize);
    let rho = h[w0..i_x].iter().map(|v| v * v).sum::<f64>() / (i_x - w0).max(1) as f64;
    let env_x = (-k * (t_x - t_dir)).exp();
    let amp = if rho > 0.0 {
        rho.sqrt() / env_x
    } else {
        1e-3 / (4.0 * PI * (t_dir * SPEED_OF_SOUND).max(1e-3))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let root3 = 3f64.sqrt();
    for (i, v) in h.iter_mut().enumerate().skip(i_dir + 1) {
        let t = i as f64 / fs;
        let ramp = if i >= i_x {
            1.0
        } else {
            0.5 * (1.0 - (PI * (t - t_dir) / EARLY_SECS).cos())
        };
        let u: f64 = rng.random_range(-root3..root3);
        *v += amp * (-k * (t - t_dir)).exp() * ramp * u;
    }

    let e = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut h {
        *v /= e;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_unit_energy() {
        let room = Room {
            dims: [6.0, 4.0, 3.0],
            rt60: 0.4,
        };
        let a = gen_rir(&room, [1.0, 1.0, 1.5], [4.0, 2.5, 1.2], 48_000, 3).unwrap();
        let b = gen_rir(&room, [1.0, 1.0, 1.5], [4.0, 2.5, 1.2], 48_000, 3).unwrap();
        let c = gen_rir(&room, [1.0, 1.0, 1.5], [4.0, 2.5, 1.2], 48_000, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((a.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(a.len() as f64 >= 0.4 * 48_000.0);
    }

    #[test]
    fn rejects_bad_geometry() {
        let room = Room {
            dims: [5.0, 3.0, 3.0],
            rt60: 0.3,
        };
        assert!(matches!(
            gen_rir(&room, [6.0, 1.0, 1.0], [1.0, 1.0, 1.0], 48_000, 0),
            Err(Error::Geometry(_))
        ));
        let dead = Room {
            dims: [5.0, 3.0, 3.0],
            rt60: 0.01,
        };
        assert!(gen_rir(&dead, [1.0, 1.0, 1.0], [2.0, 1.0, 1.0], 48_000, 0).is_err());
    }
}

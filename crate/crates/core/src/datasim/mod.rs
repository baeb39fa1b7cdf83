//! Synthetic echo scenes with ground truth.
//!
//! The microphone is `d = s + r + v + z`: near-end speech `s` (early part
//! when reverberant), its late reverberation `r`, noise `v`, and the echo
//! `z`, which is the far-end reference `x` through a memoryless loudspeaker
//! nonlinearity, a room impulse response and a bulk delay. Every component
//! is rounded to `f32` and `d` is summed in `f32`, so the identity survives
//! a float WAV round trip bit for bit.

pub mod corpus;
pub mod rir;

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::wav::{read_wav, write_wav, WavFormat};

pub use corpus::{Corpus, CorpusManifest};
pub use rir::{direct_delay, gen_rir, Room, SPEED_OF_SOUND};

/// Frame length of the VAD labels; one label per STFT hop.
pub const VAD_FRAME: usize = 480;
/// Frames within this many dB of the loudest near-end frame are active.
pub const VAD_FLOOR_DB: f64 = -40.0;

/// Span after the direct path that counts as the early part of a near-end
/// RIR; everything later is reverberation.
const NEAR_EARLY_SECS: f64 = 0.05;

/// Far-end clips are normalised to this peak before distortion.
const FAR_PEAK: f64 = 0.5;
/// The mixture is scaled down when its peak would exceed this.
const MIX_HEADROOM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Near-end single talk: no far-end signal.
    #[serde(rename = "ST-NE")]
    StNe,
    /// Far-end single talk: no near-end speech.
    #[serde(rename = "ST-FE")]
    StFe,
    /// Double talk.
    #[serde(rename = "DT")]
    Dt,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::StNe, Scenario::StFe, Scenario::Dt];

    pub fn has_near(self) -> bool {
        self != Scenario::StFe
    }

    pub fn has_far(self) -> bool {
        self != Scenario::StNe
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scenario::StNe => "ST-NE",
            Scenario::StFe => "ST-FE",
            Scenario::Dt => "DT",
        })
    }
}

/// Memoryless loudspeaker model: hard clip at `clip · peak(x)`, then
/// `tanh(g·x) / g`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Nonlinearity {
    pub clip: f64,
    pub gain: f64,
}

impl Default for Nonlinearity {
    fn default() -> Self {
        Self { clip: 0.8, gain: 2.0 }
    }
}

pub fn nonlinear_distort(x: &AudioBuffer, nl: &Nonlinearity) -> AudioBuffer {
    let level = nl.clip * x.peak();
    let g = nl.gain;
    let out = x
        .samples
        .iter()
        .map(|&v| {
            let c = v.clamp(-level, level);
            if g > 0.0 {
                (g * c).tanh() / g
            } else {
                c
            }
        })
        .collect();
    AudioBuffer::new(x.sample_rate, out)
}

/// Full linear convolution via FFT, `x.len() + h.len() - 1` samples.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let n = x.len() + h.len() - 1;
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |v: &[f64]| -> Vec<Complex64> {
        let mut b: Vec<Complex64> = v.iter().map(|&s| Complex64::new(s, 0.0)).collect();
        b.resize(size, Complex64::default());
        b
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    a[..n].iter().map(|c| c.re / size as f64).collect()
}

/// `z = shift(conv(F(x), rir), delay)`, truncated to `x.len()`.
pub fn make_echo(x: &AudioBuffer, rir: &[f64], delay: usize, nl: Option<&Nonlinearity>) -> AudioBuffer {
    let src = match nl {
        Some(nl) => nonlinear_distort(x, nl),
        None => x.clone(),
    };
    let wet = convolve(&src.samples, rir);
    let mut z = vec![0.0; x.len()];
    for (i, v) in z.iter_mut().enumerate().skip(delay) {
        *v = wet.get(i - delay).copied().unwrap_or(0.0);
    }
    AudioBuffer::new(x.sample_rate, z)
}

/// One label per [`VAD_FRAME`] block (the last one may be short): 1 when
/// the block energy is within [`VAD_FLOOR_DB`] of the loudest block.
pub fn vad_labels(s: &[f64]) -> Vec<u8> {
    let energies: Vec<f64> = s.chunks(VAD_FRAME).map(|b| b.iter().map(|v| v * v).sum()).collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    energies
        .iter()
        .map(|&e| (peak > 0.0 && e > 0.0 && 10.0 * (e / peak).log10() > VAD_FLOOR_DB) as u8)
        .collect()
}

/// Mean square of `x` over the blocks whose label is 1.
pub fn active_power(x: &[f64], labels: &[u8]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for (block, &l) in x.chunks(VAD_FRAME).zip(labels) {
        if l == 1 {
            sum += block.iter().map(|v| v * v).sum::<f64>();
            n += block.len();
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub scenario: Scenario,
    /// Scene length in samples.
    pub len: usize,
    pub room_dims: [f64; 3],
    pub rt60: f64,
    pub snr_db: f64,
    pub ser_db: f64,
    /// Bulk echo delay in samples, on top of the acoustic path.
    pub delay: usize,
    pub nearend_reverb: bool,
    pub nonlinearity: Option<Nonlinearity>,
    pub loudspeaker: [f64; 3],
    pub mic: [f64; 3],
    pub talker: [f64; 3],
}

/// Sampling ranges for [`SceneSpec::sample`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneRanges {
    pub room_min: [f64; 3],
    pub room_max: [f64; 3],
    pub rt60: [f64; 2],
    pub snr_db: [f64; 2],
    pub ser_db: [f64; 2],
    pub delay: [usize; 2],
    pub reverb_prob: f64,
    pub nonlinear_prob: f64,
    pub clip: [f64; 2],
    pub gain: [f64; 2],
    pub scenarios: Vec<Scenario>,
    pub secs: f64,
}

/// Outer limits of every range; [`SceneRanges::clamped`] enforces them.
pub mod bounds {
    pub const ROOM_MIN: [f64; 3] = [5.0, 3.0, 3.0];
    pub const ROOM_MAX: [f64; 3] = [8.0, 5.0, 4.0];
    pub const RT60: [f64; 2] = [0.2, 1.2];
    pub const SNR_DB: [f64; 2] = [0.0, 25.0];
    pub const SER_DB: [f64; 2] = [-15.0, 15.0];
    pub const DELAY: [usize; 2] = [0, 24_000];
    pub const REVERB_PROB: f64 = 0.3;
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            room_min: bounds::ROOM_MIN,
            room_max: bounds::ROOM_MAX,
            rt60: bounds::RT60,
            snr_db: bounds::SNR_DB,
            ser_db: bounds::SER_DB,
            delay: bounds::DELAY,
            reverb_prob: bounds::REVERB_PROB,
            nonlinear_prob: 1.0,
            clip: [0.6, 1.0],
            gain: [0.5, 3.0],
            scenarios: Scenario::ALL.to_vec(),
            secs: 6.0,
        }
    }
}

fn clamp_pair(r: [f64; 2], lim: [f64; 2]) -> [f64; 2] {
    let lo = r[0].clamp(lim[0], lim[1]);
    [lo, r[1].clamp(lo, lim[1])]
}

impl SceneRanges {
    /// Every range intersected with [`bounds`]; inverted ranges collapse
    /// to their lower end.
    pub fn clamped(mut self) -> Self {
        for a in 0..3 {
            let [lo, hi] = clamp_pair(
                [self.room_min[a], self.room_max[a]],
                [bounds::ROOM_MIN[a], bounds::ROOM_MAX[a]],
            );
            self.room_min[a] = lo;
            self.room_max[a] = hi;
        }
        self.rt60 = clamp_pair(self.rt60, bounds::RT60);
        self.snr_db = clamp_pair(self.snr_db, bounds::SNR_DB);
        self.ser_db = clamp_pair(self.ser_db, bounds::SER_DB);
        let lo = self.delay[0].clamp(bounds::DELAY[0], bounds::DELAY[1]);
        self.delay = [lo, self.delay[1].clamp(lo, bounds::DELAY[1])];
        self.reverb_prob = self.reverb_prob.clamp(0.0, 1.0);
        self.nonlinear_prob = self.nonlinear_prob.clamp(0.0, 1.0);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios to sample from".into()));
        }
        if !(self.secs > 0.0) {
            return Err(Error::Config("scene length must be positive".into()));
        }
        if self.clip[0] <= 0.0 || self.clip[0] > self.clip[1] || self.gain[0] < 0.0 || self.gain[0] > self.gain[1] {
            return Err(Error::Config("nonlinearity ranges are invalid".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Minimum distance of any position from the walls.
const WALL_MARGIN: f64 = 0.5;

fn position(rng: &mut ChaCha8Rng, dims: [f64; 3]) -> [f64; 3] {
    let mut p = [0.0; 3];
    for a in 0..3 {
        p[a] = rng.random_range(WALL_MARGIN..dims[a] - WALL_MARGIN);
    }
    p
}

fn position_away(rng: &mut ChaCha8Rng, dims: [f64; 3], from: [f64; 3], min: f64) -> [f64; 3] {
    let mut p = position(rng, dims);
    for _ in 0..64 {
        if rir::distance(p, from) >= min {
            break;
        }
        p = position(rng, dims);
    }
    p
}

impl SceneSpec {
    /// Draws a spec from `ranges` (clamped to [`bounds`] first).
    pub fn sample(seed: u64, ranges: &SceneRanges) -> Result<Self> {
        let r = ranges.clone().clamped();
        r.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scenario = r.scenarios[rng.random_range(0..r.scenarios.len())];
        let mut room_dims = [0.0; 3];
        for a in 0..3 {
            room_dims[a] = uniform(&mut rng, [r.room_min[a], r.room_max[a]]);
        }
        let rt60 = uniform(&mut rng, r.rt60);
        let snr_db = uniform(&mut rng, r.snr_db);
        let ser_db = uniform(&mut rng, r.ser_db);
        let delay = rng.random_range(r.delay[0]..=r.delay[1]);
        let nearend_reverb = rng.random_bool(r.reverb_prob);
        let nonlinearity = rng.random_bool(r.nonlinear_prob).then(|| Nonlinearity {
            clip: uniform(&mut rng, r.clip),
            gain: uniform(&mut rng, r.gain),
        });
        let mic = position(&mut rng, room_dims);
        let loudspeaker = position_away(&mut rng, room_dims, mic, 0.3);
        let talker = position_away(&mut rng, room_dims, mic, 0.5);
        Ok(Self {
            seed,
            scenario,
            len: (r.secs * SAMPLE_RATE as f64).round() as usize,
            room_dims,
            rt60,
            snr_db,
            ser_db,
            delay,
            nearend_reverb,
            nonlinearity,
            loudspeaker,
            mic,
            talker,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let r = SceneRanges::default();
        let inside = |v: f64, b: [f64; 2]| v >= b[0] && v <= b[1];
        let ok = (0..3).all(|a| inside(self.room_dims[a], [r.room_min[a], r.room_max[a]]))
            && inside(self.rt60, r.rt60)
            && inside(self.snr_db, r.snr_db)
            && inside(self.ser_db, r.ser_db)
            && self.delay <= r.delay[1]
            && self.len > 0;
        if !ok {
            return Err(Error::Config(format!(
                "scene {} is outside the sampling bounds",
                self.seed
            )));
        }
        let room = self.room();
        room.check_inside(self.loudspeaker, "loudspeaker")?;
        room.check_inside(self.mic, "microphone")?;
        room.check_inside(self.talker, "talker")
    }

    pub fn room(&self) -> Room {
        Room {
            dims: self.room_dims,
            rt60: self.rt60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Microphone `d`.
    pub mic: AudioBuffer,
    /// Near-end speech `s`.
    pub near: AudioBuffer,
    /// Late near-end reverberation `r`.
    pub reverb: AudioBuffer,
    /// Noise `v`.
    pub noise: AudioBuffer,
    /// Echo `z`.
    pub echo: AudioBuffer,
    /// Far-end reference `x`.
    pub far: AudioBuffer,
    /// Near-end activity per [`VAD_FRAME`] block, from `s`.
    pub vad_labels: Vec<u8>,
    /// Loudspeaker-to-microphone impulse response (before the bulk delay).
    pub echo_rir: Vec<f64>,
}

fn f32_round(x: &[f64], gain: f64) -> Vec<f64> {
    x.iter().map(|&v| (v * gain) as f32 as f64).collect()
}

/// `((s + r) + v) + z`, evaluated in `f32`.
pub fn mic_sum(s: &[f64], r: &[f64], v: &[f64], z: &[f64]) -> Vec<f64> {
    (0..s.len())
        .map(|i| (((s[i] as f32 + r[i] as f32) + v[i] as f32) + z[i] as f32) as f64)
        .collect()
}

fn pick<'a>(
    clips: &'a [AudioBuffer],
    rng: &mut ChaCha8Rng,
    len: usize,
    avoid: Option<usize>,
) -> Result<(usize, &'a [f64])> {
    let mut i = rng.random_range(0..clips.len());
    if Some(i) == avoid && clips.len() > 1 {
        i = (i + 1) % clips.len();
    }
    let c = &clips[i].samples;
    if c.len() < len {
        return Err(Error::InsufficientData(format!(
            "corpus clip {i} has {} samples, the scene needs {len}",
            c.len()
        )));
    }
    let off = rng.random_range(0..=c.len() - len);
    Ok((i, &c[off..off + len]))
}

fn split_rir(h: &[f64], direct: f64) -> (Vec<f64>, Vec<f64>) {
    let cut = ((direct + NEAR_EARLY_SECS * SAMPLE_RATE as f64) as usize).min(h.len());
    let mut early = h.to_vec();
    let mut late = h.to_vec();
    early[cut..].fill(0.0);
    late[..cut].fill(0.0);
    (early, late)
}

fn conv_trunc(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = convolve(x, h);
    y.truncate(x.len());
    y
}

/// Builds the scene for `spec` from `corpus`. Levels are set on the
/// near-end-active blocks of the (nominal) near-end speech, which is also
/// used in far-end single talk before it is zeroed.
pub fn mix_scene(spec: &SceneSpec, corpus: &Corpus) -> Result<Scene> {
    spec.validate()?;
    corpus.validate()?;
    let len = spec.len;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6d69_785f_7363_656e);
    let (far_idx, far) = pick(&corpus.speech, &mut rng, len, None)?;
    let (_, near0) = pick(&corpus.speech, &mut rng, len, Some(far_idx))?;
    let (_, noise0) = pick(&corpus.noise, &mut rng, len, None)?;
    let (echo_seed, near_seed) = (rng.random::<u64>(), rng.random::<u64>());

    let room = spec.room();
    let echo_rir = gen_rir(&room, spec.loudspeaker, spec.mic, SAMPLE_RATE, echo_seed)?;
    let far_peak = far.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if far_peak == 0.0 {
        return Err(Error::InsufficientData("far-end clip is silent".into()));
    }
    let far = AudioBuffer::new(SAMPLE_RATE, far.iter().map(|v| v * FAR_PEAK / far_peak).collect());
    let z0 = make_echo(&far, &echo_rir, spec.delay, spec.nonlinearity.as_ref()).samples;

    let (s0, r0) = if spec.nearend_reverb {
        let h = gen_rir(&room, spec.talker, spec.mic, SAMPLE_RATE, near_seed)?;
        let (early, late) = split_rir(&h, direct_delay(spec.talker, spec.mic, SAMPLE_RATE));
        (conv_trunc(near0, &early), conv_trunc(near0, &late))
    } else {
        (near0.to_vec(), vec![0.0; len])
    };

    let labels = vad_labels(&s0);
    let ps = active_power(&s0, &labels);
    let pv = active_power(noise0, &labels);
    let pz = active_power(&z0, &labels);
    if ps == 0.0 || pv == 0.0 {
        return Err(Error::InsufficientData("near-end or noise clip is silent".into()));
    }
    if pz == 0.0 && spec.scenario.has_far() {
        return Err(Error::InsufficientData(
            "echo is silent while the near end is active".into(),
        ));
    }
    let gv = (ps / (pv * 10f64.powf(spec.snr_db / 10.0))).sqrt();
    let gz = if pz > 0.0 {
        (ps / (pz * 10f64.powf(spec.ser_db / 10.0))).sqrt()
    } else {
        0.0
    };

    let (gs, gz) = match spec.scenario {
        Scenario::Dt => (1.0, gz),
        Scenario::StFe => (0.0, gz),
        Scenario::StNe => (1.0, 0.0),
    };
    let peak = (0..len)
        .map(|i| (gs * (s0[i] + r0[i]) + gv * noise0[i] + gz * z0[i]).abs())
        .fold(0.0, f64::max);
    let g = if peak > MIX_HEADROOM { MIX_HEADROOM / peak } else { 1.0 };

    let s = f32_round(&s0, gs * g);
    let r = f32_round(&r0, gs * g);
    let v = f32_round(noise0, gv * g);
    let z = f32_round(&z0, gz * g);
    let x = if spec.scenario.has_far() {
        f32_round(&far.samples, 1.0)
    } else {
        vec![0.0; len]
    };
    let d = mic_sum(&s, &r, &v, &z);
    let buf = |v: Vec<f64>| AudioBuffer::new(SAMPLE_RATE, v);
    Ok(Scene {
        spec: spec.clone(),
        vad_labels: vad_labels(&s),
        mic: buf(d),
        near: buf(s),
        reverb: buf(r),
        noise: buf(v),
        echo: buf(z),
        far: buf(x),
        echo_rir,
    })
}

impl Scene {
    /// Samples over which echo suppression is measured: the whole scene in
    /// far-end single talk, none otherwise.
    pub fn erle_segment(&self) -> Option<std::ops::Range<usize>> {
        (self.spec.scenario == Scenario::StFe).then_some(0..self.mic.len())
    }

    /// Checks `d == ((s + r) + v) + z` sample for sample.
    pub fn check_identity(&self) -> Result<()> {
        let sum = mic_sum(
            &self.near.samples,
            &self.reverb.samples,
            &self.noise.samples,
            &self.echo.samples,
        );
        match sum
            .iter()
            .zip(&self.mic.samples)
            .position(|(a, b)| a.to_bits() != b.to_bits())
        {
            None if sum.len() == self.mic.len() => Ok(()),
            None => Err(Error::Contract("scene components differ in length".into())),
            Some(i) => Err(Error::Contract(format!(
                "scene {}: mic differs from the sum of its parts at sample {i}",
                self.spec.seed
            ))),
        }
    }

    /// Writes the six signals as float WAVs named `{name}_{part}.wav`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<SceneRecord> {
        let files = SceneFiles::named(name);
        for (part, buf) in files.paths().into_iter().zip(self.parts()) {
            write_wav(dir.join(part), buf, WavFormat::Float32)?;
        }
        Ok(SceneRecord {
            name: name.to_string(),
            spec: self.spec.clone(),
            files,
            vad_labels: self.vad_labels.clone(),
        })
    }

    fn parts(&self) -> [&AudioBuffer; 6] {
        [&self.mic, &self.near, &self.reverb, &self.noise, &self.echo, &self.far]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFiles {
    pub mic: PathBuf,
    pub near: PathBuf,
    pub reverb: PathBuf,
    pub noise: PathBuf,
    pub echo: PathBuf,
    pub far: PathBuf,
}

impl SceneFiles {
    fn named(name: &str) -> Self {
        let p = |part: &str| PathBuf::from(format!("{name}_{part}.wav"));
        Self {
            mic: p("mic"),
            near: p("near"),
            reverb: p("reverb"),
            noise: p("noise"),
            echo: p("echo"),
            far: p("far"),
        }
    }

    fn paths(&self) -> [&PathBuf; 6] {
        [&self.mic, &self.near, &self.reverb, &self.noise, &self.echo, &self.far]
    }
}

/// One manifest entry: spec, file names relative to the manifest, labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub name: String,
    pub spec: SceneSpec,
    pub files: SceneFiles,
    pub vad_labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneManifest {
    pub version: u32,
    pub scenes: Vec<SceneRecord>,
}

pub const SCENE_MANIFEST_VERSION: u32 = 1;

impl SceneManifest {
    pub fn new(scenes: Vec<SceneRecord>) -> Self {
        Self {
            version: SCENE_MANIFEST_VERSION,
            scenes,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        if m.version != SCENE_MANIFEST_VERSION {
            return Err(Error::Contract(format!(
                "scene manifest version {} is not supported (expected {SCENE_MANIFEST_VERSION})",
                m.version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

impl SceneRecord {
    /// Reads the signals back; `echo_rir` is left empty.
    pub fn load(&self, dir: &Path) -> Result<Scene> {
        let rd = |p: &PathBuf| read_wav(dir.join(p), Some(SAMPLE_RATE));
        let f = &self.files;
        Ok(Scene {
            spec: self.spec.clone(),
            mic: rd(&f.mic)?,
            near: rd(&f.near)?,
            reverb: rd(&f.reverb)?,
            noise: rd(&f.noise)?,
            echo: rd(&f.echo)?,
            far: rd(&f.far)?,
            vad_labels: self.vad_labels.clone(),
            echo_rir: Vec::new(),
        })
    }
}

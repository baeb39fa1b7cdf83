use aec_core::datasim::{mix_scene, Corpus, Scenario, SceneRanges, SceneSpec};
use aec_core::dsp::{stft, StftConfig};
use aec_core::nlms::{snap_complex, NlmsConfig, NlmsState};
use aec_core::pipeline::{process, DelayMode, PipelineConfig};
use aec_core::{AudioBuffer, SAMPLE_RATE};
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Single-tap NLMS on raw samples, written out independently of the
/// library: the fixed point every bin of the STFT filter should reach.
fn sample_domain_nlms(mic: &[f64], reference: &[f64], mu: f64, delta: f64) -> f64 {
    let mut w = 0.0;
    for (d, x) in mic.iter().zip(reference) {
        let e = d - w * x;
        w += mu * x * e / (x * x + delta);
    }
    w
}

#[test]
fn scalar_path_matches_the_sample_domain_oracle() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let hop = StftConfig::default().hop;
    let x: Vec<f64> = (0..201 * hop).map(|_| r.random_range(-0.5..0.5)).collect();
    let d: Vec<f64> = x.iter().map(|v| 0.5 * v).collect();
    let cfg = NlmsConfig::default();
    let oracle = sample_domain_nlms(&d, &x, cfg.mu, cfg.delta);
    assert!((oracle - 0.5).abs() < 1e-9);

    let sc = StftConfig::default();
    let xs = stft(&AudioBuffer::new(SAMPLE_RATE, x), &sc).unwrap();
    let ds = stft(&AudioBuffer::new(SAMPLE_RATE, d), &sc).unwrap();
    let mut st = NlmsState::new(cfg).unwrap();
    let bins = cfg.bins;
    let (mut e, mut y) = (vec![Complex64::default(); bins], vec![Complex64::default(); bins]);
    let frames = 200.min(xs.frames);
    for t in 0..frames {
        st.step(ds.frame(t), xs.frame(t), &mut e, &mut y).unwrap();
    }
    let last = ds.frame(frames - 1);
    for k in 0..bins {
        let w = st.weight(k, 0);
        assert!(
            (w - Complex64::new(oracle, 0.0)).norm() <= 0.05 * oracle,
            "bin {k}: {w}"
        );
        assert!(e[k].norm() <= 1e-2 * last[k].norm(), "bin {k}");
    }
    let (pe, pd): (f64, f64) = (
        e.iter().map(|c| c.norm_sqr()).sum(),
        last.iter().map(|c| c.norm_sqr()).sum(),
    );
    assert!(pe <= 1e-4 * pd, "residual {:.1} dB", 10.0 * (pe / pd).log10());
}

/// Peak `|y| / |echo|` over the frames after a reference onset that follows
/// a long stretch of near-silent reference under loud near-end noise.
fn onset_overshoot(cfg: NlmsConfig, seed: u64) -> f64 {
    let bins = cfg.bins;
    let mut st = NlmsState::new(cfg).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut c = |g: f64| Complex64::new(r.random_range(-g..g), r.random_range(-g..g));
    let path: Vec<Complex64> = (0..bins).map(|_| c(1.0)).collect();
    let (mut e, mut y) = (vec![Complex64::default(); bins], vec![Complex64::default(); bins]);
    let mut worst: f64 = 0.0;
    for t in 0..600 {
        let level = if t < 500 { 1e-4 } else { 1.0 };
        let x: Vec<Complex64> = (0..bins).map(|_| snap_complex(c(level))).collect();
        let echo: Vec<Complex64> = x.iter().zip(&path).map(|(a, h)| a * h).collect();
        let d: Vec<Complex64> = echo.iter().map(|z| snap_complex(z + c(0.1))).collect();
        st.step(&d, &x, &mut e, &mut y).unwrap();
        if t >= 500 {
            for k in 0..bins {
                worst = worst.max(y[k].norm() / echo[k].norm().max(1e-3));
            }
        }
    }
    worst
}

#[test]
fn quiet_reference_under_near_end_noise_does_not_blow_up_at_onset() {
    let cfg = NlmsConfig {
        taps: 4,
        bins: 32,
        ..NlmsConfig::default()
    };
    let plain = onset_overshoot(NlmsConfig { err_reg: 0.0, ..cfg }, 3);
    let regularised = onset_overshoot(cfg, 3);
    // The plain update lets the weights drift while the reference is quiet.
    assert!(plain > 100.0, "plain overshoot {plain:.1}");
    assert!(regularised < 10.0, "regularised overshoot {regularised:.1}");
}

/// `10·log10(‖out − (mic − echo)‖² / ‖echo‖²)` over the second half.
fn residual_echo_db(mic: &[f64], echo: &[f64], out: &[f64]) -> f64 {
    let h = mic.len() / 2;
    let (mut num, mut den) = (0.0, 0.0);
    for i in h..mic.len() {
        let clean = mic[i] - echo[i];
        num += (out[i] - clean) * (out[i] - clean);
        den += echo[i] * echo[i];
    }
    10.0 * (num / den).log10()
}

#[test]
fn linear_stage_reduces_echo_in_noisy_reverberant_scenes() {
    let ranges = SceneRanges {
        scenarios: vec![Scenario::StFe, Scenario::Dt],
        secs: 6.0,
        ..SceneRanges::default()
    };
    let corpus = Corpus::synthetic(4, 4, 2, ranges.secs);
    let mut worst = f64::NEG_INFINITY;
    for seed in 0..6 {
        let spec = SceneSpec::sample(seed, &ranges).unwrap();
        let scene = mix_scene(&spec, &corpus).unwrap();
        let cfg = PipelineConfig {
            delay: DelayMode::Fixed(spec.delay),
            linear_only: true,
            ..PipelineConfig::default()
        };
        let out = process(&cfg, None, &scene.mic, &scene.far, None, false).unwrap().output;
        let db = residual_echo_db(&scene.mic.samples, &scene.echo.samples, &out.samples);
        worst = worst.max(db);
    }
    assert!(worst < -2.0, "worst residual echo {worst:.1} dB");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn weights_stay_bounded_for_any_stable_step(mu in 0.01f64..1.99, taps in 1usize..6, seed in any::<u64>()) {
        let cfg = NlmsConfig { mu, taps, bins: 16, ..NlmsConfig::default() };
        let mut st = NlmsState::new(cfg).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let path: Vec<Complex64> = (0..16).map(|_| Complex64::new(r.random_range(-2.0..2.0), r.random_range(-2.0..2.0))).collect();
        let (mut e, mut y) = (vec![Complex64::default(); 16], vec![Complex64::default(); 16]);
        for _ in 0..2_000 {
            let gain = 10f64.powf(r.random_range(-3.0..1.0));
            let x: Vec<Complex64> = (0..16).map(|_| snap_complex(Complex64::new(r.random_range(-gain..gain), r.random_range(-gain..gain)))).collect();
            let d: Vec<Complex64> = x.iter().zip(&path).map(|(a, h)| snap_complex(a * h)).collect();
            st.step(&d, &x, &mut e, &mut y).unwrap();
            for k in 0..16 {
                prop_assert_eq!(e[k] + y[k], d[k]);
            }
        }
        prop_assert!(st.weights().iter().all(|w| w.re.is_finite() && w.im.is_finite()));
        prop_assert!(st.weight_norm() <= 100.0);
    }
}

use aec_core::datasim::{
    direct_delay, gen_rir, make_echo, mix_scene, nonlinear_distort, vad_labels, Corpus, Nonlinearity, Room, Scenario,
    SceneManifest, SceneRanges, SceneSpec, VAD_FRAME,
};
use aec_core::{AudioBuffer, SAMPLE_RATE};
use proptest::prelude::*;

const FS: f64 = SAMPLE_RATE as f64;

/// Reverberation time from Schroeder backward integration: straight-line
/// fit of the decay curve between -5 and -35 dB, extrapolated to -60 dB.
fn schroeder_rt60(h: &[f64]) -> f64 {
    let mut edc = vec![0.0; h.len()];
    let mut acc = 0.0;
    for i in (0..h.len()).rev() {
        acc += h[i] * h[i];
        edc[i] = acc;
    }
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .map(|(i, e)| (i as f64 / FS, 10.0 * (e / edc[0]).log10()))
        .filter(|(_, db)| (-35.0..=-5.0).contains(db))
        .collect();
    let n = pts.len() as f64;
    let (mx, my) = (
        pts.iter().map(|p| p.0).sum::<f64>() / n,
        pts.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    -60.0 / (sxy / sxx)
}

#[test]
fn rir_decay_matches_requested_rt60() {
    let cases = [
        ([5.0, 3.0, 3.0], 0.2, [1.0, 1.0, 1.2], [3.5, 2.0, 1.5]),
        ([8.0, 5.0, 4.0], 0.2, [2.0, 1.0, 1.2], [5.5, 3.0, 2.5]),
        ([6.0, 4.0, 3.0], 0.5, [1.0, 3.0, 1.0], [4.0, 1.0, 2.0]),
        ([7.0, 4.5, 3.5], 0.8, [0.7, 0.7, 0.7], [6.0, 4.0, 3.0]),
        ([8.0, 5.0, 4.0], 1.2, [4.0, 2.5, 2.0], [4.5, 2.6, 2.1]),
        ([5.0, 3.0, 3.0], 1.2, [1.0, 1.0, 1.0], [4.0, 2.0, 2.0]),
    ];
    for (seed, (dims, rt60, src, rcv)) in cases.into_iter().enumerate() {
        let h = gen_rir(&Room { dims, rt60 }, src, rcv, SAMPLE_RATE, seed as u64).unwrap();
        assert!(h.len() as f64 >= rt60 * FS);
        let est = schroeder_rt60(&h);
        assert!(
            (est / rt60 - 1.0).abs() <= 0.2,
            "room {dims:?}: asked {rt60}, measured {est:.3}"
        );
    }
}

#[test]
fn rir_peak_sits_at_the_direct_path() {
    let room = Room {
        dims: [6.0, 4.0, 3.0],
        rt60: 0.6,
    };
    for (src, rcv) in [([1.0, 1.0, 1.0], [2.0, 1.5, 1.2]), ([0.6, 3.0, 2.0], [5.1, 0.9, 0.8])] {
        let h = gen_rir(&room, src, rcv, SAMPLE_RATE, 9).unwrap();
        let dist = ((src[0] - rcv[0]).powi(2) + (src[1] - rcv[1]).powi(2) + (src[2] - rcv[2]).powi(2)).sqrt();
        let expect = dist / 343.0 * FS;
        assert!((direct_delay(src, rcv, SAMPLE_RATE) - expect).abs() < 1e-9);
        // Before the first wall reflection only the direct sound is present.
        let first_wall = (0..3)
            .flat_map(|a| {
                [src[a], room.dims[a] - src[a]].map(|w| {
                    let mut img = src;
                    img[a] = if w == src[a] {
                        -src[a]
                    } else {
                        2.0 * room.dims[a] - src[a]
                    };
                    ((img[0] - rcv[0]).powi(2) + (img[1] - rcv[1]).powi(2) + (img[2] - rcv[2]).powi(2)).sqrt()
                })
            })
            .fold(f64::INFINITY, f64::min)
            / 343.0
            * FS;
        let end = ((expect + first_wall) / 2.0) as usize;
        let peak = (0..end).max_by(|&a, &b| h[a].abs().total_cmp(&h[b].abs())).unwrap();
        assert!(
            (peak as f64 - expect).abs() <= 1.0,
            "peak at {peak}, expected {expect:.2}"
        );
        assert!(h[..expect as usize - 17].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn vanishing_gain_without_clipping_is_identity() {
    let x = AudioBuffer::new(SAMPLE_RATE, (0..1000).map(|i| (i as f64 * 0.01).sin() * 0.9).collect());
    let y = nonlinear_distort(&x, &Nonlinearity { clip: 1.0, gain: 1e-3 });
    assert!(y.samples.iter().zip(&x.samples).all(|(a, b)| (a - b).abs() < 1e-4));
}

#[test]
fn constant_above_clip_level_is_clipped_constant() {
    let mut v = vec![0.5; 100];
    v[0] = 1.0;
    let x = AudioBuffer::new(SAMPLE_RATE, v);
    let y = nonlinear_distort(&x, &Nonlinearity { clip: 0.4, gain: 0.0 });
    assert!(y.samples.iter().all(|&s| s == 0.4));
}

fn dft_mag(x: &[f64], f: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, v) in x.iter().enumerate() {
        let p = 2.0 * std::f64::consts::PI * f * n as f64 / FS;
        re += v * p.cos();
        im -= v * p.sin();
    }
    (re * re + im * im).sqrt() / x.len() as f64
}

#[test]
fn distorted_sine_gains_odd_harmonics() {
    let f = 1000.0;
    let x = AudioBuffer::new(
        SAMPLE_RATE,
        (0..4800)
            .map(|n| (2.0 * std::f64::consts::PI * f * n as f64 / FS).sin())
            .collect(),
    );
    let y = nonlinear_distort(&x, &Nonlinearity::default());
    let (h1, h2, h3) = (
        dft_mag(&y.samples, f),
        dft_mag(&y.samples, 2.0 * f),
        dft_mag(&y.samples, 3.0 * f),
    );
    assert!(h3 > 1e-2 * h1, "third harmonic {h3:e} vs fundamental {h1:e}");
    assert!(h2 < 1e-9, "even harmonic {h2:e}");
    assert!(dft_mag(&x.samples, 3.0 * f) < 1e-12);
}

#[test]
fn echo_matches_direct_convolution() {
    let x: Vec<f64> = (0..3000).map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0).collect();
    let h: Vec<f64> = (0..257).map(|k| 0.9f64.powi(k) * ((k as f64) * 0.7).cos()).collect();
    let xb = AudioBuffer::new(SAMPLE_RATE, x.clone());
    let nl = Nonlinearity { clip: 0.7, gain: 1.5 };
    for (delay, nl) in [(0, None), (123, Some(&nl)), (5000, None)] {
        let src = match nl {
            Some(nl) => nonlinear_distort(&xb, nl).samples,
            None => x.clone(),
        };
        let z = make_echo(&xb, &h, delay, nl);
        assert_eq!(z.len(), x.len());
        for n in 0..x.len() {
            let mut acc = 0.0;
            for (k, hk) in h.iter().enumerate() {
                if n >= delay + k {
                    acc += hk * src[n - delay - k];
                }
            }
            assert!((z.samples[n] - acc).abs() <= 1e-6, "n={n} delay={delay}");
        }
    }
}

fn corpus() -> Corpus {
    Corpus::synthetic(5, 3, 2, 3.0)
}

fn short_ranges() -> SceneRanges {
    SceneRanges {
        secs: 2.0,
        rt60: [0.2, 0.5],
        ..SceneRanges::default()
    }
}

fn db(a: f64, b: f64) -> f64 {
    10.0 * (a / b).log10()
}

/// Power over the blocks where `labels` is 1, recomputed from scratch.
fn power_on(x: &[f64], labels: &[u8]) -> f64 {
    let idx: Vec<usize> = (0..x.len()).filter(|i| labels[i / VAD_FRAME] == 1).collect();
    idx.iter().map(|&i| x[i] * x[i]).sum::<f64>() / idx.len() as f64
}

#[test]
fn scenes_meet_their_levels_and_identity() {
    let c = corpus();
    for seed in 0..12 {
        let spec = SceneSpec::sample(seed, &short_ranges()).unwrap();
        let sc = mix_scene(&spec, &c).unwrap();
        sc.check_identity().unwrap();
        for i in 0..sc.mic.len() {
            let sum = ((sc.near.samples[i] as f32 + sc.reverb.samples[i] as f32) + sc.noise.samples[i] as f32)
                + sc.echo.samples[i] as f32;
            assert_eq!(sum as f64, sc.mic.samples[i]);
        }
        let near = &sc.near.samples;
        match spec.scenario {
            Scenario::StFe => {
                assert!(near.iter().chain(&sc.reverb.samples).all(|&v| v == 0.0));
                assert!(sc.vad_labels.iter().all(|&l| l == 0));
                for i in 0..sc.mic.len() {
                    assert_eq!(
                        sc.mic.samples[i],
                        (sc.noise.samples[i] as f32 + sc.echo.samples[i] as f32) as f64
                    );
                }
            }
            Scenario::StNe => {
                assert!(sc.echo.samples.iter().chain(&sc.far.samples).all(|&v| v == 0.0));
                let lab = vad_labels(near);
                assert!((db(power_on(near, &lab), power_on(&sc.noise.samples, &lab)) - spec.snr_db).abs() <= 0.01);
            }
            Scenario::Dt => {
                let lab = vad_labels(near);
                let ps = power_on(near, &lab);
                assert!((db(ps, power_on(&sc.noise.samples, &lab)) - spec.snr_db).abs() <= 0.01);
                assert!((db(ps, power_on(&sc.echo.samples, &lab)) - spec.ser_db).abs() <= 0.01);
            }
        }
        assert!(sc.mic.peak() <= 0.9 + 1e-6);
    }
}

#[test]
fn zero_ser_means_equal_powers() {
    let ranges = SceneRanges {
        ser_db: [0.0, 0.0],
        scenarios: vec![Scenario::Dt],
        ..short_ranges()
    };
    let c = corpus();
    for seed in [1, 2, 3] {
        let spec = SceneSpec::sample(seed, &ranges).unwrap();
        assert_eq!(spec.ser_db, 0.0);
        let sc = mix_scene(&spec, &c).unwrap();
        let lab = vad_labels(&sc.near.samples);
        let (ps, pz) = (power_on(&sc.near.samples, &lab), power_on(&sc.echo.samples, &lab));
        assert!((ps / pz - 1.0).abs() <= 1e-6, "{ps} vs {pz}");
    }
}

#[test]
fn scene_is_a_pure_function_of_spec_and_corpus() {
    let c = corpus();
    let spec = SceneSpec::sample(42, &short_ranges()).unwrap();
    assert_eq!(spec, SceneSpec::sample(42, &short_ranges()).unwrap());
    assert_eq!(mix_scene(&spec, &c).unwrap(), mix_scene(&spec, &c).unwrap());
    assert_ne!(spec, SceneSpec::sample(43, &short_ranges()).unwrap());
}

#[test]
fn scenes_survive_a_wav_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus();
    let records: Vec<_> = (0..3)
        .map(|seed| {
            let sc = mix_scene(&SceneSpec::sample(seed, &short_ranges()).unwrap(), &c).unwrap();
            sc.write(dir.path(), &format!("scene{seed:03}")).unwrap()
        })
        .collect();
    let path = dir.path().join("manifest.json");
    SceneManifest::new(records).save(&path).unwrap();
    let m = SceneManifest::load(&path).unwrap();
    for rec in &m.scenes {
        let back = rec.load(dir.path()).unwrap();
        back.check_identity().unwrap();
        let orig = mix_scene(&rec.spec, &c).unwrap();
        assert_eq!(back.mic, orig.mic);
        assert_eq!(back.vad_labels, orig.vad_labels);
    }
}

#[test]
fn short_clips_and_empty_corpora_are_rejected() {
    let spec = SceneSpec::sample(
        0,
        &SceneRanges {
            secs: 4.0,
            ..SceneRanges::default()
        },
    )
    .unwrap();
    assert!(mix_scene(&spec, &Corpus::synthetic(1, 2, 1, 1.0)).is_err());
    let empty = Corpus {
        speech: vec![],
        noise: corpus().noise,
    };
    assert!(mix_scene(&spec, &empty).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampled_specs_stay_in_bounds(seed in any::<u64>()) {
        let s = SceneSpec::sample(seed, &SceneRanges::default()).unwrap();
        s.validate().unwrap();
        prop_assert!((5.0..=8.0).contains(&s.room_dims[0]) && (3.0..=5.0).contains(&s.room_dims[1]) && (3.0..=4.0).contains(&s.room_dims[2]));
        prop_assert!((0.2..=1.2).contains(&s.rt60));
        prop_assert!((0.0..=25.0).contains(&s.snr_db));
        prop_assert!((-15.0..=15.0).contains(&s.ser_db));
        prop_assert!(s.delay <= 24_000);
    }

    #[test]
    fn vad_rule_holds_per_frame(vals in proptest::collection::vec(-1.0f64..1.0, 1..5000), gain in 0.0f64..1.0) {
        let s: Vec<f64> = vals.iter().enumerate().map(|(i, v)| v * gain.powi((i / VAD_FRAME) as i32 % 7)).collect();
        let labels = vad_labels(&s);
        let e: Vec<f64> = s.chunks(VAD_FRAME).map(|b| b.iter().map(|v| v * v).sum()).collect();
        let peak = e.iter().cloned().fold(0.0, f64::max);
        for (l, ei) in labels.iter().zip(&e) {
            let expect = peak > 0.0 && *ei > 0.0 && 10.0 * (ei / peak).log10() > -40.0;
            prop_assert_eq!(*l == 1, expect);
        }
    }
}

use aec_core::datasim::{direct_delay, gen_rir, make_echo, Corpus, Room};
use aec_core::tde::{align, estimate_delay, TdeConfig};
use aec_core::{AudioBuffer, SAMPLE_RATE};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn white(seed: u64, len: usize) -> AudioBuffer {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    AudioBuffer::new(SAMPLE_RATE, (0..len).map(|_| r.random_range(-0.5..0.5)).collect())
}

fn short_path(seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..64).map(|k| r.random_range(-1.0..1.0) * 0.9f64.powi(k)).collect()
}

/// Lag maximising the plain time-domain cross-correlation.
fn brute_force_lag(mic: &[f64], reference: &[f64], max_lag: usize) -> usize {
    (0..=max_lag)
        .map(|lag| {
            let c: f64 = (lag..mic.len()).map(|n| mic[n] * reference[n - lag]).sum();
            (lag, c.abs())
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

#[test]
fn short_path_echo_agrees_with_brute_force_correlation() {
    for seed in 0..3 {
        let x = white(seed, 72_000);
        let mic = make_echo(&x, &short_path(seed), 4_800, None);
        let oracle = brute_force_lag(&mic.samples, &x.samples, 9_600);
        assert!((4_800..4_864).contains(&oracle));
        let est = estimate_delay(&mic, &x, &TdeConfig::default()).unwrap();
        assert!(
            (est.delay as i64 - oracle as i64).abs() <= 480,
            "est {} oracle {oracle}",
            est.delay
        );
        assert!(est.confidence > 0.5);
    }
}

#[test]
fn reverberant_echo_locks_onto_the_direct_path() {
    let far = &Corpus::synthetic(8, 1, 1, 6.0).speech[0];
    let room = Room {
        dims: [7.0, 4.5, 3.5],
        rt60: 1.0,
    };
    let (src, rcv) = ([1.0, 1.0, 1.2], [4.5, 3.0, 1.5]);
    let rir = gen_rir(&room, src, rcv, SAMPLE_RATE, 3).unwrap();
    let bulk = 9_000;
    let truth = bulk as f64 + direct_delay(src, rcv, SAMPLE_RATE);
    let est = estimate_delay(&make_echo(far, &rir, bulk, None), far, &TdeConfig::default()).unwrap();
    assert!(
        (est.delay as f64 - truth).abs() <= 480.0,
        "est {} truth {truth:.0}",
        est.delay
    );
}

#[test]
fn aligning_leaves_a_sub_hop_residual() {
    let x = white(11, 96_000);
    let mic = make_echo(&x, &short_path(11), 7_321, None);
    let cfg = TdeConfig::default();
    let est = estimate_delay(&mic, &x, &cfg).unwrap();
    let aligned = align(&x, &est, mic.len());
    let residual = estimate_delay(&mic, &aligned, &cfg).unwrap();
    assert!(residual.delay <= 480, "residual {}", residual.delay);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn delaying_the_mic_shifts_the_estimate(k in 0usize..12_000, seed in 0u64..1_000) {
        let x = white(seed, 96_000);
        let mic = make_echo(&x, &short_path(seed), 2_000, None);
        let cfg = TdeConfig::default();
        let base = estimate_delay(&mic, &x, &cfg).unwrap().delay as i64;
        let shifted = estimate_delay(&mic.delayed(k), &x, &cfg).unwrap().delay as i64;
        prop_assert!((shifted - base - k as i64).abs() <= 480, "base {} shifted {} k {}", base, shifted, k);
    }
}

use aec_core::dsp::{band_split, stack_reim, BandSplitSpec, Spectrogram};
use aec_core::error::{Error, WeightError};
use aec_core::nn::{ManifestSource, WeightManifest};
use aec_core::postfilter::{MaskTarget, PostFilter, PostFilterFrame, Preset, TbnnConfig};
use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Same topology as the presets, narrow enough to run hundreds of frames.
fn tiny() -> TbnnConfig {
    TbnnConfig {
        channels: 6,
        ftlstm_hidden: 6,
        vad_hidden: 4,
        hbpf_conv_channels: 6,
        hbpf_pointwise_channels: 4,
        hbpf_gru_hidden: 8,
        validate_layers: true,
        ..TbnnConfig::preset(Preset::Small)
    }
}

type Input = Vec<[Vec<Complex64>; 3]>;

fn input(seed: u64, frames: usize) -> Input {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spec = || -> Vec<Complex64> {
        (0..481)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    };
    (0..frames).map(|_| [spec(), spec(), spec()]).collect()
}

fn process(pf: &PostFilter, x: &Input) -> Vec<PostFilterFrame> {
    let mut st = pf.new_state();
    x.iter().map(|[d, e, y]| pf.step(&mut st, d, e, y).unwrap()).collect()
}

fn to_spec(frames: &[Vec<Complex64>]) -> Spectrogram {
    Spectrogram::from_frames(frames, 0.5).unwrap()
}

#[test]
fn small_preset_shapes_and_ranges() {
    let mut cfg = TbnnConfig::preset(Preset::Small);
    cfg.validate_layers = true;
    let pf = PostFilter::seeded(cfg, 3).unwrap();
    let out = process(&pf, &input(1, 4));
    for fr in &out {
        assert_eq!(fr.estimate.len(), 481);
        assert_eq!(fr.mask.len(), 160);
        assert!(fr.estimate.iter().all(|c| c.re.is_finite() && c.im.is_finite()));
        assert!((0.0..=1.0).contains(&fr.vad));
        assert!(fr.mask.iter().all(|m| m.norm() <= 2.0));
    }
}

#[test]
fn full_graph_is_causal() {
    let pf = PostFilter::seeded(tiny(), 5).unwrap();
    let x = input(2, 8);
    let base = process(&pf, &x);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for t in [0usize, 2, 5] {
        let mut y = x.clone();
        for fr in &mut y[t + 1..] {
            for s in fr.iter_mut() {
                for c in s.iter_mut() {
                    *c += Complex64::new(rng.random_range(-1.0..1.0), 0.3);
                }
            }
        }
        let pert = process(&pf, &y);
        assert_eq!(base[..=t], pert[..=t]);
        assert_ne!(base[t + 1], pert[t + 1]);
    }
}

#[test]
fn batch_forward_matches_streaming_step() {
    let pf = PostFilter::seeded(tiny(), 6).unwrap();
    let x = input(3, 6);
    let streamed = process(&pf, &x);

    let d = to_spec(&x.iter().map(|f| f[0].clone()).collect::<Vec<_>>());
    let e = to_spec(&x.iter().map(|f| f[1].clone()).collect::<Vec<_>>());
    let y = to_spec(&x.iter().map(|f| f[2].clone()).collect::<Vec<_>>());
    let bs = BandSplitSpec::default();
    let (dw, dh) = band_split(&d, &bs).unwrap();
    let (ew, eh) = band_split(&e, &bs).unwrap();
    let (yw, yh) = band_split(&y, &bs).unwrap();
    let wb_in = stack_reim(&[&dw, &ew, &yw]).unwrap();
    let hb_in = stack_reim(&[&dh, &eh, &yh]).unwrap();
    let (wb_out, vad) = pf.wbpf_forward(&wb_in).unwrap();
    let (masks, hb_out) = pf.hbpf_forward(&hb_in, &wb_out).unwrap();
    assert_eq!(wb_out.bins, 321);
    assert_eq!(hb_out.bins, 160);
    for (t, fr) in streamed.iter().enumerate() {
        assert_eq!(&fr.estimate[..321], wb_out.frame(t));
        assert_eq!(&fr.estimate[321..], hb_out.frame(t));
        assert_eq!(fr.vad, vad[t]);
        assert_eq!(fr.mask, masks[t]);
    }

    let short = stack_reim(&[&dh, &eh]).unwrap();
    assert!(matches!(pf.hbpf_forward(&short, &wb_out), Err(Error::Contract(_))));
}

#[test]
fn zero_input_settles_to_a_frame_invariant_output() {
    let pf = PostFilter::seeded(tiny(), 7).unwrap();
    let zero = vec![Complex64::default(); 481];
    let mut st = pf.new_state();
    let out: Vec<PostFilterFrame> = (0..400)
        .map(|_| pf.step(&mut st, &zero, &zero, &zero).unwrap())
        .collect();
    let diff = |a: &PostFilterFrame, b: &PostFilterFrame| {
        a.estimate
            .iter()
            .zip(&b.estimate)
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max)
    };
    // Bias-driven output: not identically zero in the wide band.
    assert!(out[399].estimate[..321].iter().any(|c| c.norm() > 0.0));
    let early = diff(&out[1], &out[2]);
    let late = diff(&out[398], &out[399]);
    assert!(late <= 1e-6, "late step change {late}");
    assert!(late <= early);
    // High band is the mask times a zero e-branch.
    assert!(out[399].estimate[321..].iter().all(|c| *c == Complex64::default()));
}

#[test]
fn mask_override_identity_and_zero() {
    let x = input(4, 3);
    let snap = |v: &[Complex64]| -> Vec<Complex64> {
        v.iter()
            .map(|c| Complex64::new(c.re as f32 as f64, c.im as f32 as f64))
            .collect()
    };
    for target in [MaskTarget::E, MaskTarget::D] {
        let pf = PostFilter::seeded(
            TbnnConfig {
                mask_target: target,
                ..tiny()
            },
            8,
        )
        .unwrap();
        let branch = match target {
            MaskTarget::E => 1,
            MaskTarget::D => 0,
        };
        let mut st = pf.new_state();
        st.set_mask_override(Some(Complex32::new(1.0, 0.0)));
        for fr in &x {
            let out = pf.step(&mut st, &fr[0], &fr[1], &fr[2]).unwrap();
            assert_eq!(out.estimate[321..], snap(&fr[branch][321..])[..]);
        }
        let mut st = pf.new_state();
        st.set_mask_override(Some(Complex32::new(0.0, 0.0)));
        for fr in &x {
            let out = pf.step(&mut st, &fr[0], &fr[1], &fr[2]).unwrap();
            assert!(out.estimate[321..].iter().all(|c| c.norm() == 0.0));
        }
    }
}

#[test]
fn mask_never_exceeds_clip_even_for_large_inputs() {
    for clip in [0.5f32, 2.0] {
        let pf = PostFilter::seeded(
            TbnnConfig {
                mask_clip: clip,
                ..tiny()
            },
            10,
        )
        .unwrap();
        let mut x = input(5, 5);
        for fr in &mut x {
            for s in fr.iter_mut() {
                for c in s.iter_mut() {
                    *c *= 300.0;
                }
            }
        }
        for fr in process(&pf, &x) {
            assert!(fr.mask.iter().all(|m| m.norm() <= clip as f64));
        }
    }
}

#[test]
fn reset_equals_fresh_state() {
    let pf = PostFilter::seeded(tiny(), 11).unwrap();
    let a = input(6, 4);
    let b = input(7, 4);
    let mut st = pf.new_state();
    for [d, e, y] in &a {
        pf.step(&mut st, d, e, y).unwrap();
    }
    pf.reset(&mut st);
    let after: Vec<_> = b.iter().map(|[d, e, y]| pf.step(&mut st, d, e, y).unwrap()).collect();
    assert_eq!(after, process(&pf, &b));
}

#[test]
fn vad_gate_scales_the_estimate() {
    let x = input(8, 2);
    let plain = PostFilter::seeded(tiny(), 12).unwrap();
    let gated = PostFilter::seeded(
        TbnnConfig {
            vad_gate: true,
            ..tiny()
        },
        12,
    )
    .unwrap();
    for (p, g) in process(&plain, &x).iter().zip(process(&gated, &x)) {
        assert_eq!(p.vad, g.vad);
        for (a, b) in p.estimate.iter().zip(&g.estimate) {
            assert!((a * p.vad - b).norm() <= 1e-6 * (1.0 + a.norm()));
        }
    }
}

#[test]
fn wrong_frame_size_is_a_contract_error() {
    let pf = PostFilter::seeded(tiny(), 13).unwrap();
    let mut st = pf.new_state();
    let short = vec![Complex64::default(); 480];
    let ok = vec![Complex64::default(); 481];
    assert!(matches!(pf.step(&mut st, &short, &ok, &ok), Err(Error::Contract(_))));
}

#[test]
fn manifest_round_trip_is_bit_identical() {
    let cfg = tiny();
    let (seeded, manifest) = PostFilter::seed_manifest(cfg.clone(), 21).unwrap();
    let bytes = manifest.to_bytes().unwrap();
    let loaded = WeightManifest::from_bytes(&bytes).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);

    let pf = PostFilter::from_manifest(cfg.clone(), &loaded, false).unwrap();
    let x = input(9, 3);
    assert_eq!(process(&seeded, &x), process(&pf, &x));
    assert_eq!(
        process(&PostFilter::seeded(cfg.clone(), 21).unwrap(), &x),
        process(&pf, &x)
    );

    let mut src = ManifestSource::new(&loaded);
    let bound = PostFilter::build(cfg, &mut src).unwrap();
    assert_eq!(bound.describe().param_count, src.bound_count());
    assert_eq!(bound.describe().param_count, loaded.param_count());
    assert!(src.unused().is_empty());
    assert_eq!(loaded.metadata.config_hash, bound.config().hash());
}

#[test]
fn manifest_errors_are_specific() {
    let cfg = tiny();
    let (_, full) = PostFilter::seed_manifest(cfg.clone(), 22).unwrap();

    let dropped = "hbpf.gru.weight_hh_l0";
    let mut missing = WeightManifest::new(full.metadata.clone());
    for name in full.entries().keys() {
        if name != dropped {
            let (shape, values) = full.get(name).unwrap();
            missing.insert(name, shape, values).unwrap();
        }
    }
    match PostFilter::from_manifest(cfg.clone(), &missing, false) {
        Err(Error::Weights(WeightError::Missing { names, .. })) => assert_eq!(names, vec![dropped.to_string()]),
        other => panic!("expected a missing-tensor error, got {other:?}"),
    }
    let msg = PostFilter::from_manifest(cfg.clone(), &missing, false)
        .unwrap_err()
        .to_string();
    assert!(msg.contains(dropped), "{msg}");

    let mut reshaped = WeightManifest::new(full.metadata.clone());
    for name in full.entries().keys() {
        let (shape, values) = full.get(name).unwrap();
        if name == "wbpf.vad.fc.bias" {
            reshaped.insert(name, &[1, 1], values).unwrap();
        } else {
            reshaped.insert(name, shape, values).unwrap();
        }
    }
    assert!(matches!(
        PostFilter::from_manifest(cfg.clone(), &reshaped, false),
        Err(Error::Weights(WeightError::ShapeMismatch(m))) if m[0].name == "wbpf.vad.fc.bias"
    ));

    let mut extra = full.clone();
    extra.insert("wbpf.spare", &[2], &[0.0, 1.0]).unwrap();
    assert!(matches!(
        PostFilter::from_manifest(cfg.clone(), &extra, false),
        Err(Error::Weights(WeightError::Unused(u))) if u == vec!["wbpf.spare".to_string()]
    ));
    PostFilter::from_manifest(cfg.clone(), &extra, true).unwrap();

    let mut bytes = full.to_bytes().unwrap();
    bytes[8] = 99;
    assert!(matches!(
        WeightManifest::from_bytes(&bytes),
        Err(Error::Weights(WeightError::Version { found: 99, .. }))
    ));
}

#[test]
fn seeding_is_reproducible_and_seed_sensitive() {
    let x = input(10, 2);
    let a = process(&PostFilter::seeded(tiny(), 30).unwrap(), &x);
    assert_eq!(a, process(&PostFilter::seeded(tiny(), 30).unwrap(), &x));
    assert_ne!(a, process(&PostFilter::seeded(tiny(), 31).unwrap(), &x));
}

#[test]
fn large_preset_parameter_count_against_reference() {
    let pf = PostFilter::seeded(TbnnConfig::preset(Preset::Large), 1).unwrap();
    let d = pf.describe();
    assert_eq!(d.param_count, d.wbpf_params + d.hbpf_params);
    assert_eq!(
        d.param_count,
        d.tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum::<usize>()
    );
    let dev = d.reference_deviation.unwrap();
    assert!(dev.abs() <= 0.2, "deviation {dev}");
    let small = PostFilter::seeded(TbnnConfig::preset(Preset::Small), 1).unwrap();
    assert!(small.param_count() < pf.param_count());
    assert!(small.describe().reference_deviation.is_none());

    let graph: serde_json::Value = serde_json::from_str(&pf.graph_json().unwrap()).unwrap();
    let layers = graph["layers"].as_array().unwrap();
    assert!(layers.iter().any(|l| l["name"] == "wbpf.ftlstm.f_lstm"));
    assert!(layers.iter().any(|l| l["name"] == "hbpf.align"));
}

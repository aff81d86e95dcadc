use kws_core::augment::{build_datasources, scale_noise_for_snr, spec_augment, AugmentPlan, SpecAugmentConfig};
use kws_core::disnorm::SourceKind;
use kws_core::frontend::{AudioClip, FeatureMatrix, FrontendConfig, LogMel};
use kws_core::window::Utterance;
use kws_core::KwsError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn wave(len: usize, seed: u64, amp: f64) -> AudioClip {
    let mut s = seed.wrapping_add(1);
    AudioClip::new(
        (0..len)
            .map(|i| {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                let noise = (s >> 40) as f64 / (1u64 << 24) as f64 - 0.5;
                (amp * (0.6 * (i as f64 * 0.05).sin() + 0.4 * noise)) as f32
            })
            .collect(),
    )
}

fn rms(v: &[f32]) -> f64 {
    (v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

fn utterances(n: usize) -> Vec<Utterance> {
    (0..n)
        .map(|i| Utterance {
            id: format!("u{i}"),
            label: i % 3,
            clip: wave(16000 - 500 * i, i as u64, 0.3),
        })
        .collect()
}

fn frontend() -> LogMel {
    LogMel::new(&FrontendConfig::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn achieved_snr_matches_request(snr in 0.0f64..20.0, seed in 0u64..1000, len in 200usize..4000) {
        let clean = wave(len, seed, 0.3);
        let noise = wave(777, seed + 1, 0.1);
        let scaled = scale_noise_for_snr(&clean, noise.samples(), snr).unwrap();
        let achieved = 20.0 * (clean.rms() / rms(&scaled)).log10();
        prop_assert!((achieved - snr).abs() < 0.01);
    }

    #[test]
    fn spec_augment_only_touches_masked_stripes(seed in any::<u64>()) {
        let f = FeatureMatrix::new(100, 40, (0..4000).map(|v| (v % 97) as f32 + 1.0).collect()).unwrap();
        let out = spec_augment(&f, &SpecAugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        for t in 0..100 {
            for b in 0..40 {
                if out.get(t, b) != f.get(t, b) {
                    prop_assert_eq!(out.get(t, b), 0.0);
                    let row_masked = out.row(t).iter().all(|&v| v == 0.0);
                    let col_masked = (0..100).all(|r| out.get(r, b) == 0.0);
                    prop_assert!(row_masked || col_masked);
                }
            }
        }
        let again = spec_augment(&f, &SpecAugmentConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(out, again);
    }
}

#[test]
fn three_examples_give_nine_tagged_windows() {
    let utts = utterances(3);
    let noise = vec![wave(20000, 99, 0.2)];
    let fe = frontend();
    let plan = AugmentPlan::default();
    let ds = build_datasources(&utts, &noise, &plan, &fe, 5, 0).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.iter().map(Vec::len).sum::<usize>(), 9);
    for (s, windows) in ds.iter().enumerate() {
        for (w, u) in windows.iter().zip(&utts) {
            assert_eq!(w.source, SourceKind::for_source(s));
            assert_eq!(w.label, u.label);
        }
    }
    // clean windows are the plain features of the fixed-length clip
    for (w, u) in ds[0].iter().zip(&utts) {
        assert_eq!(w.features, fe.compute(&u.clip.fit_to(plan.clip_samples)).unwrap());
    }
    // noisy and masked windows share audio; they differ only in masked cells
    for (noisy, masked) in ds[1].iter().zip(&ds[2]) {
        let (a, b) = (&noisy.features, &masked.features);
        assert_ne!(a, &ds[0][0].features);
        for t in 0..a.frames() {
            for f in 0..a.bins() {
                if a.get(t, f) != b.get(t, f) {
                    assert_eq!(b.get(t, f), 0.0);
                    let row = b.row(t).iter().all(|&v| v == 0.0);
                    let col = (0..b.frames()).all(|r| b.get(r, f) == 0.0);
                    assert!(row || col);
                }
            }
        }
    }
}

#[test]
fn epoch_stream_is_a_function_of_seed_and_epoch() {
    let utts = utterances(4);
    let noise = vec![wave(20000, 7, 0.2), wave(9000, 8, 0.1)];
    let fe = frontend();
    let plan = AugmentPlan::default();
    let a = build_datasources(&utts, &noise, &plan, &fe, 11, 2).unwrap();
    let b = build_datasources(&utts, &noise, &plan, &fe, 11, 2).unwrap();
    let c = build_datasources(&utts, &noise, &plan, &fe, 11, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a[0], c[0]);
    assert_ne!(a[1], c[1]);
}

#[test]
fn missing_noise_is_a_config_error() {
    let err = build_datasources(&utterances(2), &[], &AugmentPlan::default(), &frontend(), 0, 0).unwrap_err();
    assert!(matches!(err, KwsError::Config { .. }), "{err:?}");
}

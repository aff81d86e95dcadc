use kws_core::frontend::{decode_wav, encode_wav, AudioClip, FrontendConfig, LogMel};
use proptest::prelude::*;

fn frontend() -> LogMel {
    LogMel::new(&FrontendConfig::default()).unwrap()
}

fn tone(len: usize, hz: f64, amp: f64) -> AudioClip {
    AudioClip::new(
        (0..len)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * hz * i as f64 / 16000.0).sin()) as f32)
            .collect(),
    )
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

#[test]
fn tone_peaks_in_the_bracketing_filter() {
    // 42 equally spaced mel points from 20 Hz to 7600 Hz; filter k spans
    // points k..k+2 and peaks at k+1
    let (lo, hi) = (mel(20.0), mel(7600.0));
    let pts: Vec<f64> = (0..42).map(|i| lo + (hi - lo) * i as f64 / 41.0).collect();
    let target = mel(1000.0);
    let expected = (0..40)
        .filter(|&k| pts[k] < target && target < pts[k + 2])
        .min_by(|&a, &b| (pts[a + 1] - target).abs().total_cmp(&(pts[b + 1] - target).abs()))
        .unwrap();
    let f = frontend().compute(&tone(16000, 1000.0, 0.5)).unwrap();
    for t in 5..95 {
        let row = f.row(t);
        let argmax = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        assert_eq!(argmax, expected, "frame {t}");
    }
}

#[test]
fn doubling_amplitude_adds_two_ln_two() {
    let fe = frontend();
    let clip = AudioClip::new(
        (0..8000)
            .map(|i| (0.2 * ((i as f64 * 0.013).sin() + 0.5 * (i as f64 * 0.31).cos())) as f32)
            .collect(),
    );
    let louder = AudioClip::new(clip.samples().iter().map(|s| s * 2.0).collect());
    let (a, b) = (fe.compute(&clip).unwrap(), fe.compute(&louder).unwrap());
    let floor = 1e-10f64.ln() as f32;
    let want = 2.0 * std::f64::consts::LN_2;
    let mut checked = 0;
    for (x, y) in a.data().iter().zip(b.data()) {
        if *x > floor + 5.0 {
            assert!((f64::from(y - x) - want).abs() < 1e-4, "{x} -> {y}");
            checked += 1;
        }
    }
    assert!(checked > a.data().len() / 2);
}

#[test]
fn identical_bytes_give_identical_features() {
    let bytes = encode_wav(&tone(12345, 440.0, 0.3)).unwrap();
    let fe = frontend();
    let a = fe.compute(&decode_wav(&bytes).unwrap()).unwrap();
    let b = fe.compute(&decode_wav(&bytes).unwrap()).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frame_count_and_floor(len in 1usize..=32000, seed in any::<u64>()) {
        let mut s = seed;
        let samples: Vec<f32> = (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 0.5
            })
            .collect();
        let f = frontend().compute(&AudioClip::new(samples)).unwrap();
        prop_assert_eq!(f.frames(), len.div_ceil(160));
        prop_assert_eq!(f.bins(), 40);
        let floor = 1e-10f64.ln() as f32;
        prop_assert!(f.data().iter().all(|v| v.is_finite() && *v >= floor));
    }
}

use kws_core::evaluator::{
    binary_scores, det_curve, frr_at_far, read_scores_csv, sliding_window_scores, window_offsets, write_det_csv,
    write_scores_csv, Aggregation, ScoreRecord,
};
use kws_core::frontend::FeatureMatrix;
use kws_core::model::{Classifier, Pass};
use kws_core::tensor::{Tape, Tensor, Var};
use kws_core::Result;
use proptest::prelude::*;

/// Two classes; class 1's logit is the window mean, class 0's is zero.
/// Also records how many windows each call saw.
struct MeanDetector {
    frames: usize,
    bins: usize,
    batches: Vec<usize>,
}

impl Classifier<f64> for MeanDetector {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits(&mut self, tape: &mut Tape<f64>, input: Var, _pass: Pass) -> Result<Var> {
        let plane = self.frames * self.bins;
        let mut w = vec![0.0; 2 * plane];
        w[plane..].fill(1.0 / plane as f64);
        let w = Tensor::new(vec![2, 1, self.frames, self.bins], w)?;
        let wv = tape.param(&w, 0, false);
        let y = tape.conv2d(input, wv, 1, 0)?;
        let n = tape.shape(input)[0];
        self.batches.push(n);
        tape.reshape(y, vec![n, 2])
    }
}

fn detector(frames: usize) -> MeanDetector {
    MeanDetector {
        frames,
        bins: 4,
        batches: Vec::new(),
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[test]
fn window_counts() {
    for (frames, expected) in [(100, 1), (110, 2), (105, 2), (60, 1), (200, 11)] {
        let mut m = detector(100);
        let f = FeatureMatrix::filled(frames, 4, 0.5);
        sliding_window_scores(&mut m, &f, 100, 10, 0.0, Aggregation::Max).unwrap();
        assert_eq!(m.batches, vec![expected], "{frames} frames");
    }
}

#[test]
fn max_aggregation_picks_the_single_high_window() {
    let (frames, window, shift) = (100, 20, 10);
    let mut f = FeatureMatrix::filled(frames, 4, 0.0);
    for t in 40..50 {
        for b in 0..4 {
            f.data_mut()[t * 4 + b] = 5.0;
        }
    }
    let mut m = detector(window);
    let max = sliding_window_scores(&mut m, &f, window, shift, 0.0, Aggregation::Max).unwrap();
    let mean = sliding_window_scores(&mut m, &f, window, shift, 0.0, Aggregation::Mean).unwrap();

    // window means by direct count of hot frames inside each window
    let starts: Vec<usize> = (0..=(frames - window) / shift).map(|k| k * shift).collect();
    let p1: Vec<f64> = starts
        .iter()
        .map(|&s| {
            let hot = (s..s + window).filter(|t| (40..50).contains(t)).count();
            sigmoid(hot as f64 * 5.0 / window as f64)
        })
        .collect();
    let best = p1.iter().copied().fold(0.0, f64::max);
    assert!((max[1] - sigmoid(2.5)).abs() < 1e-12);
    assert!((max[1] - best).abs() < 1e-12);
    assert!((max[0] - 0.5).abs() < 1e-12);
    let avg = p1.iter().sum::<f64>() / p1.len() as f64;
    assert!((mean[1] - avg).abs() < 1e-12);
}

#[test]
fn short_utterance_is_padded() {
    let mut m = detector(20);
    let f = FeatureMatrix::filled(10, 4, 2.0);
    let s = sliding_window_scores(&mut m, &f, 20, 10, -2.0, Aggregation::Max).unwrap();
    // ten frames at 2 and ten padded at -2 average to zero
    assert!((s[1] - 0.5).abs() < 1e-12);
}

#[test]
fn binary_scores_split_by_keyword_labels() {
    let rec = |l: usize, s: [f64; 3]| ScoreRecord {
        utterance_id: format!("u{l}"),
        true_label: l,
        scores: s.to_vec(),
    };
    let recs = [rec(0, [0.7, 0.2, 0.1]), rec(1, [0.1, 0.3, 0.6]), rec(2, [0.2, 0.5, 0.3])];
    let (pos, neg) = binary_scores(&recs, &[0, 1]);
    assert_eq!(pos, [0.7, 0.3]);
    assert_eq!(neg, [0.5]);
}

#[test]
fn score_and_det_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let recs: Vec<ScoreRecord> = (0..20)
        .map(|i| {
            let a = (i as f64 * 0.37).sin().abs() / 3.0;
            ScoreRecord {
                utterance_id: format!("spk{i}/clip,{i}.wav"),
                true_label: i % 3,
                scores: vec![a, 1.0 / 3.0 + 1e-17 * i as f64, 2.0 / 3.0 - a],
            }
        })
        .collect();
    let p = dir.path().join("scores.csv");
    write_scores_csv(&p, &recs).unwrap();
    assert_eq!(read_scores_csv(&p).unwrap(), recs);

    let (pos, neg) = binary_scores(&recs, &[1]);
    let curve = det_curve(&pos, &neg).unwrap();
    let d = dir.path().join("det.csv");
    write_det_csv(&d, &curve).unwrap();
    let text = std::fs::read_to_string(&d).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("threshold,far,frr"));
    for (line, p) in lines.zip(&curve.points) {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(v, [p.threshold, p.far, p.frr]);
    }
}

#[test]
fn malformed_score_csv_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "utterance_id,true_label,score_0\na,0,notanumber\n").unwrap();
    assert!(matches!(read_scores_csv(&p), Err(kws_core::KwsError::Data(_))));
    assert!(matches!(
        read_scores_csv(dir.path().join("missing.csv")),
        Err(kws_core::KwsError::Io { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn offsets_cover_every_frame(frames in 1usize..400, window in 1usize..120, shift in 1usize..30) {
        let o = window_offsets(frames, window, shift);
        prop_assert_eq!(o[0], 0);
        prop_assert!(o.windows(2).all(|p| p[1] - p[0] == shift));
        prop_assert!(o.last().unwrap() + window >= frames);
        if o.len() > 1 {
            prop_assert!(o[o.len() - 2] + window < frames);
        }
    }

    #[test]
    fn frr_at_far_is_monotone_in_target(
        pos in prop::collection::vec(0u8..40, 1..80),
        neg in prop::collection::vec(0u8..40, 1..80),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let pos: Vec<f64> = pos.into_iter().map(f64::from).collect();
        let neg: Vec<f64> = neg.into_iter().map(f64::from).collect();
        let c = det_curve(&pos, &neg).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (rl, rh) = (frr_at_far(&c, lo).unwrap(), frr_at_far(&c, hi).unwrap());
        prop_assert!(rh.frr <= rl.frr + 1e-12, "frr({hi})={} > frr({lo})={}", rh.frr, rl.frr);
    }
}

mod common;

use common::naive_conv2d;
use kws_core::tensor::ops::{conv2d, depthwise_conv2d};
use kws_core::tensor::Tensor;
use proptest::prelude::*;

#[derive(Debug, Clone)]
struct Case {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    x: Vec<f64>,
    wt: Vec<f64>,
}

fn case(depthwise: bool) -> impl Strategy<Value = Case> {
    (1usize..=2, 1usize..=4, 1usize..=4, 1usize..=3, 1usize..=3, 1usize..=2, 0usize..=1)
        .prop_flat_map(move |(n, ci, co, kh, kw, stride, pad)| {
            let co = if depthwise { ci } else { co };
            (kh.max(2)..=7, kw.max(2)..=7).prop_flat_map(move |(h, w)| {
                let wlen = if depthwise { ci * kh * kw } else { co * ci * kh * kw };
                (
                    prop::collection::vec(-1.0f64..1.0, n * ci * h * w),
                    prop::collection::vec(-1.0f64..1.0, wlen),
                )
                    .prop_map(move |(x, wt)| Case {
                        n,
                        ci,
                        co,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        pad,
                        x,
                        wt,
                    })
            })
        })
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn conv2d_matches_naive_loops(c in case(false)) {
        let x = Tensor::new(vec![c.n, c.ci, c.h, c.w], c.x.clone()).unwrap();
        let w = Tensor::new(vec![c.co, c.ci, c.kh, c.kw], c.wt.clone()).unwrap();
        let y = conv2d(&x, &w, c.stride, c.pad).unwrap();
        let (want, shape) = naive_conv2d(&c.x, &c.wt, [c.n, c.ci, c.h, c.w], [c.co, c.kh, c.kw], c.stride, c.pad, false);
        prop_assert_eq!(y.shape(), &shape[..]);
        prop_assert!(max_diff(y.data(), &want) < 1e-6);
    }

    #[test]
    fn depthwise_matches_naive_loops(c in case(true)) {
        let x = Tensor::new(vec![c.n, c.ci, c.h, c.w], c.x.clone()).unwrap();
        let w = Tensor::new(vec![c.ci, c.kh, c.kw], c.wt.clone()).unwrap();
        let y = depthwise_conv2d(&x, &w, c.stride, c.pad).unwrap();
        let (want, shape) = naive_conv2d(&c.x, &c.wt, [c.n, c.ci, c.h, c.w], [c.ci, c.kh, c.kw], c.stride, c.pad, true);
        prop_assert_eq!(y.shape(), &shape[..]);
        prop_assert!(max_diff(y.data(), &want) < 1e-6);
    }

    #[test]
    fn f32_conv_tracks_f64(c in case(false)) {
        let x = Tensor::new(vec![c.n, c.ci, c.h, c.w], c.x.clone()).unwrap();
        let w = Tensor::new(vec![c.co, c.ci, c.kh, c.kw], c.wt.clone()).unwrap();
        let y64 = conv2d(&x, &w, c.stride, c.pad).unwrap();
        let y32 = conv2d(&x.cast::<f32>(), &w.cast::<f32>(), c.stride, c.pad).unwrap();
        let back: Vec<f64> = y32.data().iter().map(|&v| f64::from(v)).collect();
        prop_assert!(max_diff(y64.data(), &back) < 1e-5);
    }
}

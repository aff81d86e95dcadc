//! Labelled, source-tagged feature windows: the unit of training and inference.

use crate::disnorm::SourceKind;
use crate::error::{KwsError, Result};
use crate::frontend::{AudioClip, FeatureMatrix};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureWindow {
    pub features: FeatureMatrix,
    pub label: usize,
    pub source: SourceKind,
}

impl FeatureWindow {
    pub fn new(features: FeatureMatrix, label: usize, source: SourceKind) -> Self {
        Self {
            features,
            label,
            source,
        }
    }
}

/// A labelled recording before feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub label: usize,
    pub clip: AudioClip,
}

/// Stacks windows of equal size into an `N x 1 x frames x bins` tensor.
pub fn stack<T: Scalar>(windows: &[&FeatureMatrix]) -> Result<Tensor<T>> {
    let first = windows
        .first()
        .ok_or_else(|| KwsError::Contract("cannot stack an empty batch".into()))?;
    let (frames, bins) = (first.frames(), first.bins());
    let mut data = Vec::with_capacity(windows.len() * frames * bins);
    for w in windows {
        if (w.frames(), w.bins()) != (frames, bins) {
            return Err(KwsError::Dimension(format!(
                "batch mixes {frames}x{bins} and {}x{} windows",
                w.frames(),
                w.bins()
            )));
        }
        data.extend(w.data().iter().map(|&v| T::from_f32_lossless(v)));
    }
    Tensor::new(vec![windows.len(), 1, frames, bins], data)
}

/// Splits an `N x 1 x frames x bins` tensor back into feature matrices.
pub fn unstack<T: Scalar>(batch: &Tensor<T>) -> Result<Vec<FeatureMatrix>> {
    let [n, 1, frames, bins] = *batch.shape() else {
        return Err(KwsError::Dimension(format!(
            "expected N x 1 x frames x bins, got {:?}",
            batch.shape()
        )));
    };
    let per = frames * bins;
    (0..n)
        .map(|i| {
            let d = batch.data()[i * per..(i + 1) * per]
                .iter()
                .map(|v| v.as_f32())
                .collect();
            FeatureMatrix::new(frames, bins, d)
        })
        .collect()
}

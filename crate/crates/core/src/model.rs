//! What every counting network exposes to training, adaptation and evaluation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{Mat, ParamSet};
use crate::objectives::decode_ordinal;

/// Output head of a counting network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Head {
    /// One linear unit regressing the count.
    Scalar,
    /// `rank - 1` sigmoid units, unit `r` estimating P(count > r).
    Ordinal { rank: usize },
}

impl Head {
    pub fn width(self) -> usize {
        match self {
            Head::Scalar => 1,
            Head::Ordinal { rank } => rank - 1,
        }
    }

    pub fn rank(self) -> Option<usize> {
        match self {
            Head::Scalar => None,
            Head::Ordinal { rank } => Some(rank),
        }
    }

    /// Reporting-time count: scalar outputs are clamped at zero, ordinal outputs
    /// are thresholded at 0.5.
    pub fn decode(self, output: &[f64]) -> f64 {
        match self {
            Head::Scalar => output[0].max(0.0),
            Head::Ordinal { .. } => decode_ordinal(output) as f64,
        }
    }
}

/// Per-frame head outputs of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    per_frame_head: Mat,
}

impl ForwardTrace {
    pub fn new(per_frame_head: Mat) -> Self {
        assert!(per_frame_head.nrows() > 0, "trace needs at least one frame");
        Self {
            per_frame_head: per_frame_head.as_standard_layout().into_owned(),
        }
    }

    pub fn per_frame_head(&self) -> &Mat {
        &self.per_frame_head
    }

    pub fn frames(&self) -> usize {
        self.per_frame_head.nrows()
    }

    /// Head output at the last frame.
    pub fn final_estimate(&self) -> &[f64] {
        let width = self.per_frame_head.ncols();
        let all = self.per_frame_head.as_slice().expect("row-major trace");
        &all[all.len() - width..]
    }
}

/// Dropout randomness for one forward pass.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
}

impl Dropout<'_> {
    pub(crate) fn mask(&mut self, rows: usize, cols: usize) -> Option<Mat> {
        (self.rate > 0.0).then(|| crate::nn::dropout_mask(self.rng, rows, cols, self.rate))
    }
}

/// A network mapping a feature matrix to per-frame count outputs, trainable
/// from the final frame only.
pub trait CountModel: ParamSet {
    type Tape: Send + Sync;

    fn head(&self) -> Head;
    fn input_dim(&self) -> usize;

    /// Forward pass keeping what backward needs. `dropout = None` is inference mode.
    fn forward_tape(&self, features: &Mat, dropout: Option<Dropout<'_>>) -> Result<(ForwardTrace, Self::Tape)>;

    /// Gradient of the loss given `d_final = dL/d(final head output)`. With
    /// `tunable_only`, gradients of frozen tensors are left at zero and not computed.
    fn backward(&self, tape: &Self::Tape, d_final: &[f64], tunable_only: bool) -> Self;

    /// Per-tensor flags (in `tensors()` order): true for the subset retrained
    /// during adaptation.
    fn adaptation_mask(&self) -> Vec<bool>;

    fn forward(&self, features: &Mat) -> Result<ForwardTrace> {
        Ok(self.forward_tape(features, None)?.0)
    }

    /// Forward on the first `valid_frames` rows of a padded feature matrix.
    /// Padding rows never influence the result.
    fn forward_padded(&self, features: &Mat, valid_frames: usize) -> Result<ForwardTrace> {
        let valid = features.slice(ndarray::s![..valid_frames.min(features.nrows()), ..]).to_owned();
        self.forward(&valid)
    }

    fn predict_count(&self, features: &Mat) -> Result<f64> {
        Ok(self.head().decode(self.forward(features)?.final_estimate()))
    }
}

/// Splits tensor names by an adaptation mask into (frozen, tunable).
pub fn split_by_mask<P: ParamSet>(params: &P, mask: &[bool]) -> (Vec<String>, Vec<String>) {
    let mut frozen = Vec::new();
    let mut tunable = Vec::new();
    for ((name, _), &t) in params.tensors().into_iter().zip(mask) {
        if t {
            tunable.push(name);
        } else {
            frozen.push(name);
        }
    }
    (frozen, tunable)
}

pub(crate) fn check_finite(m: &Mat, stage: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(crate::error::Error::NonFinite(format!("activations of {stage}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn final_estimate_is_last_row() {
        let t = ForwardTrace::new(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(t.final_estimate(), &[5.0, 6.0]);
        let col_major = ForwardTrace::new(array![[1.0, 2.0], [3.0, 4.0]].reversed_axes());
        assert_eq!(col_major.final_estimate(), &[2.0, 4.0]);
    }

    #[test]
    fn decode_clamps_scalar() {
        assert_eq!(Head::Scalar.decode(&[-0.7]), 0.0);
        assert_eq!(Head::Ordinal { rank: 4 }.decode(&[0.9, 0.6, 0.1]), 2.0);
    }
}

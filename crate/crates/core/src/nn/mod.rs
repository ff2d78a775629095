//! Minimal dense-tensor building blocks with hand-written backward passes.
//!
//! Activations are `T × C` matrices (frames by channels). Every layer keeps
//! whatever its backward pass needs in a small tape struct returned from the
//! forward call; gradients are accumulated into a zeroed copy of the parameter
//! struct, so a gradient always has exactly the layout of the parameters.

mod adam;
mod layers;
mod lstm;

pub use adam::{Adam, AdamConfig};
pub use layers::{col2im, im2col, Affine, GatedConv, GatedTape};
pub use lstm::{Lstm, LstmTape, FORGET_BIAS};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Uniform};

pub type Mat = Array2<f64>;

/// A model (or model fragment) exposing its trainable tensors in a fixed order.
pub trait ParamSet: Clone + Send + Sync {
    fn tensors(&self) -> Vec<(String, &Mat)>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Self) {
        let src: Vec<&Mat> = other.tensors().into_iter().map(|(_, t)| t).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(src) {
            *dst += src;
        }
    }

    fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

/// Internal helper so composite models can gather tensors from their parts.
pub(crate) trait Collect {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>);
}

/// Fan-in scaled uniform init with unit-variance-preserving bound `sqrt(3 / fan_in)`.
pub(crate) fn uniform_init<R: Rng>(rng: &mut R, fan_in: usize, rows: usize, cols: usize) -> Mat {
    let bound = (3.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Mat::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Inverted dropout mask: entries are 0 with probability `rate`, else `1 / (1 - rate)`.
pub fn dropout_mask<R: Rng>(rng: &mut R, rows: usize, cols: usize, rate: f64) -> Mat {
    let keep = 1.0 / (1.0 - rate);
    Mat::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Column sums as a `1 × C` row, the gradient of a broadcast bias.
pub(crate) fn row_sum(m: &Mat) -> Mat {
    m.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0))
}

pub(crate) fn reversed_rows(m: &Mat) -> Mat {
    m.slice(ndarray::s![..;-1, ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let m = dropout_mask(&mut rng, 200, 50, 0.5);
        assert!(m.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / m.len() as f64;
        assert!((kept - 0.5).abs() < 0.03, "{kept}");
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.3) + sigmoid(-0.3) - 1.0).abs() < 1e-15);
    }
}

use ndarray::{s, Zip};
use rand::Rng;

use super::{row_sum, sigmoid, uniform_init, Collect, Mat};

/// `y = x W + b` applied row-wise (per frame).
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    /// `in × out`
    pub weight: Mat,
    /// `1 × out`
    pub bias: Mat,
}

impl Affine {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize) -> Self {
        Self {
            weight: uniform_init(rng, input, input, output),
            bias: Mat::zeros((1, output)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Affine) -> Mat {
        self.backward_params(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    pub fn backward_params(&self, x: &Mat, dy: &Mat, grad: &mut Affine) {
        grad.weight += &x.t().dot(dy);
        grad.bias += &row_sum(dy);
    }
}

impl Collect for Affine {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

fn tap_offset(k: usize, width: usize, dilation: usize) -> isize {
    (k as isize - (width / 2) as isize) * dilation as isize
}

/// Unfolds a `T × C` signal into `T × (width·C)` rows holding the centered,
/// zero-padded neighbourhood of each frame. Block `k` of row `t` is frame
/// `t + (k - width/2)·dilation`.
pub fn im2col(x: &Mat, width: usize, dilation: usize) -> Mat {
    let (frames, channels) = x.dim();
    let mut cols = Mat::zeros((frames, width * channels));
    for k in 0..width {
        let off = tap_offset(k, width, dilation);
        let (dst_lo, src_lo, len) = overlap(frames, off);
        if len == 0 {
            continue;
        }
        cols.slice_mut(s![dst_lo..dst_lo + len, k * channels..(k + 1) * channels])
            .assign(&x.slice(s![src_lo..src_lo + len, ..]));
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto frames.
pub fn col2im(cols: &Mat, width: usize, dilation: usize, channels: usize) -> Mat {
    let frames = cols.nrows();
    let mut x = Mat::zeros((frames, channels));
    for k in 0..width {
        let off = tap_offset(k, width, dilation);
        let (dst_lo, src_lo, len) = overlap(frames, off);
        if len == 0 {
            continue;
        }
        let mut target = x.slice_mut(s![src_lo..src_lo + len, ..]);
        target += &cols.slice(s![dst_lo..dst_lo + len, k * channels..(k + 1) * channels]);
    }
    x
}

/// For a shift `off`, rows `dst..dst+len` of the output read rows `src..src+len` of the input.
fn overlap(frames: usize, off: isize) -> (usize, usize, usize) {
    let n = frames as isize;
    let dst_lo = (-off).max(0);
    let dst_hi = (n - off).min(n);
    if dst_hi <= dst_lo {
        return (0, 0, 0);
    }
    (dst_lo as usize, (dst_lo + off) as usize, (dst_hi - dst_lo) as usize)
}

/// Gated convolutional unit: `tanh(conv_f(x)) ⊙ sigmoid(conv_g(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedConv {
    pub filter: Affine,
    pub gate: Affine,
    pub width: usize,
    pub dilation: usize,
}

pub struct GatedTape {
    cols: Mat,
    tanh: Mat,
    sig: Mat,
}

impl GatedConv {
    pub fn new<R: Rng>(rng: &mut R, input: usize, output: usize, width: usize, dilation: usize) -> Self {
        Self {
            filter: Affine::new(rng, width * input, output),
            gate: Affine::new(rng, width * input, output),
            width,
            dilation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.filter.input_dim() / self.width
    }

    pub fn forward(&self, x: &Mat) -> (Mat, GatedTape) {
        let cols = im2col(x, self.width, self.dilation);
        let tanh = self.filter.forward(&cols).mapv_into(f64::tanh);
        let sig = self.gate.forward(&cols).mapv_into(sigmoid);
        let z = &tanh * &sig;
        (z, GatedTape { cols, tanh, sig })
    }

    /// Returns `dL/dx` when `need_input_grad`.
    pub fn backward(&self, tape: &GatedTape, dz: &Mat, grad: &mut GatedConv, need_input_grad: bool) -> Option<Mat> {
        let mut d_filter = Mat::zeros(dz.raw_dim());
        let mut d_gate = Mat::zeros(dz.raw_dim());
        Zip::from(&mut d_filter)
            .and(&mut d_gate)
            .and(dz)
            .and(&tape.tanh)
            .and(&tape.sig)
            .for_each(|df, dg, &d, &a, &g| {
                *df = d * g * (1.0 - a * a);
                *dg = d * a * g * (1.0 - g);
            });
        self.filter.backward_params(&tape.cols, &d_filter, &mut grad.filter);
        self.gate.backward_params(&tape.cols, &d_gate, &mut grad.gate);
        if !need_input_grad {
            return None;
        }
        let d_cols = d_filter.dot(&self.filter.weight.t()) + d_gate.dot(&self.gate.weight.t());
        Some(col2im(&d_cols, self.width, self.dilation, self.input_dim()))
    }
}

impl Collect for GatedConv {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.filter.collect(&format!("{prefix}.filter"), out);
        self.gate.collect(&format!("{prefix}.gate"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.filter.collect_mut(out);
        self.gate.collect_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn im2col_centered_zero_padded() {
        let x = array![[1.0], [2.0], [3.0]];
        let c = im2col(&x, 3, 1);
        assert_eq!(c, array![[0.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 3.0, 0.0]]);
        let d = im2col(&x, 3, 2);
        assert_eq!(d, array![[0.0, 1.0, 3.0], [0.0, 2.0, 0.0], [1.0, 3.0, 0.0]]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = uniform_init(&mut rng, 1, 7, 3);
        let y = uniform_init(&mut rng, 1, 7, 15);
        // <im2col(x), y> == <x, col2im(y)>
        for dilation in [1, 2, 3] {
            let lhs = (&im2col(&x, 5, dilation) * &y).sum();
            let rhs = (&x * &col2im(&y, 5, dilation, 3)).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

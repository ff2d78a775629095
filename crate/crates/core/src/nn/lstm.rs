use ndarray::{s, Array1, Axis};
use rand::Rng;

use super::{sigmoid, uniform_init, Affine, Collect, Mat};

/// Initial forget-gate bias. With a zero bias the cell state halves every
/// frame, which starves the final frame of information about early frames.
pub const FORGET_BIAS: f64 = 1.0;

/// Unidirectional LSTM. Gate blocks along the `4H` axis are ordered
/// input, forget, candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    /// `in × 4H` input projection with bias.
    pub input: Affine,
    /// `H × 4H`
    pub recurrent: Mat,
}

pub struct LstmTape {
    x: Mat,
    /// Post-activation gates, `T × 4H`.
    gates: Mat,
    cell: Mat,
    tanh_cell: Mat,
    hidden: Mat,
}

impl LstmTape {
    pub fn hidden(&self) -> &Mat {
        &self.hidden
    }
}

impl Lstm {
    pub fn new<R: Rng>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let mut input = Affine::new(rng, input, 4 * hidden);
        input.bias.slice_mut(s![.., hidden..2 * hidden]).fill(FORGET_BIAS);
        Self {
            input,
            recurrent: uniform_init(rng, hidden, hidden, 4 * hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.recurrent.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.input.input_dim()
    }

    pub fn forward(&self, x: &Mat) -> (Mat, LstmTape) {
        let h_dim = self.hidden_dim();
        let frames = x.nrows();
        let mut gates = self.input.forward(x);
        let mut cell = Mat::zeros((frames, h_dim));
        let mut tanh_cell = Mat::zeros((frames, h_dim));
        let mut hidden = Mat::zeros((frames, h_dim));
        let mut h_prev = Array1::<f64>::zeros(h_dim);
        let mut c_prev = Array1::<f64>::zeros(h_dim);
        for t in 0..frames {
            let mut g = gates.row_mut(t);
            g += &h_prev.dot(&self.recurrent);
            for j in 0..h_dim {
                let i_g = sigmoid(g[j]);
                let f_g = sigmoid(g[h_dim + j]);
                let c_g = g[2 * h_dim + j].tanh();
                let o_g = sigmoid(g[3 * h_dim + j]);
                g[j] = i_g;
                g[h_dim + j] = f_g;
                g[2 * h_dim + j] = c_g;
                g[3 * h_dim + j] = o_g;
                let c = f_g * c_prev[j] + i_g * c_g;
                let tc = c.tanh();
                cell[[t, j]] = c;
                tanh_cell[[t, j]] = tc;
                hidden[[t, j]] = o_g * tc;
                c_prev[j] = c;
                h_prev[j] = o_g * tc;
            }
        }
        let tape = LstmTape {
            x: x.clone(),
            gates,
            cell,
            tanh_cell,
            hidden: hidden.clone(),
        };
        (hidden, tape)
    }

    /// Backpropagation through time. `d_hidden` is `dL/dh_t` for every frame.
    pub fn backward(&self, tape: &LstmTape, d_hidden: &Mat, grad: &mut Lstm, need_input_grad: bool) -> Option<Mat> {
        let h_dim = self.hidden_dim();
        let frames = tape.x.nrows();
        let mut d_pre = Mat::zeros((frames, 4 * h_dim));
        let mut dh_next = Array1::<f64>::zeros(h_dim);
        let mut dc_next = Array1::<f64>::zeros(h_dim);
        for t in (0..frames).rev() {
            let g = tape.gates.row(t);
            let mut dp = d_pre.row_mut(t);
            for j in 0..h_dim {
                let (i_g, f_g, c_g, o_g) = (g[j], g[h_dim + j], g[2 * h_dim + j], g[3 * h_dim + j]);
                let tc = tape.tanh_cell[[t, j]];
                let c_prev = if t > 0 { tape.cell[[t - 1, j]] } else { 0.0 };
                let dh = d_hidden[[t, j]] + dh_next[j];
                let d_o = dh * tc;
                let dc = dc_next[j] + dh * o_g * (1.0 - tc * tc);
                dp[j] = dc * c_g * i_g * (1.0 - i_g);
                dp[h_dim + j] = dc * c_prev * f_g * (1.0 - f_g);
                dp[2 * h_dim + j] = dc * i_g * (1.0 - c_g * c_g);
                dp[3 * h_dim + j] = d_o * o_g * (1.0 - o_g);
                dc_next[j] = dc * f_g;
            }
            dh_next = self.recurrent.dot(&dp.view());
        }
        if frames > 1 {
            let h_prev = tape.hidden.slice(s![..frames - 1, ..]);
            let dp_next = d_pre.slice(s![1.., ..]);
            grad.recurrent += &h_prev.t().dot(&dp_next);
        }
        grad.input.weight += &tape.x.t().dot(&d_pre);
        grad.input.bias += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
        need_input_grad.then(|| d_pre.dot(&self.input.weight.t()))
    }
}

impl Collect for Lstm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Mat)>) {
        self.input.collect(&format!("{prefix}.input"), out);
        out.push((format!("{prefix}.recurrent"), &self.recurrent));
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Mat>) {
        self.input.collect_mut(out);
        out.push(&mut self.recurrent);
    }
}

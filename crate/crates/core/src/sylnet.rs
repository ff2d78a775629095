//! The gated-convolution syllable counting network.
//!
//! ```text
//! features ─► gated conv (D→K) ─► layer 1 ─► layer 2 ─► … ─► layer N
//!                                    │          │               │
//!                                  skip₁      skip₂    …      skip_N
//!                                    └──────────┴──────┬────────┘
//!                                                      Σ
//!                          PostNet: conv (K→K) ─► ReLU ─► LSTM ─► dense head
//! ```
//!
//! Each residual layer computes `z = gated(a)`, then `a' = a + z·W_res + b_res`
//! and `skip = z·W_skip + b_skip`. All convolutions are centered with zero
//! padding, so a frame sees context from both sides. The PostNet (skip
//! projections, PostNet convolution, accumulator LSTM and head) is the part
//! retrained during adaptation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_finite, CountModel, Dropout, ForwardTrace, Head};
use crate::nn::{col2im, im2col, sigmoid, Affine, Collect, GatedConv, GatedTape, Lstm, LstmTape, Mat, ParamSet};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Scalar,
    #[default]
    Ordinal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SylNetConfig {
    /// Feature dimension D.
    pub input_dim: usize,
    pub n_layers: usize,
    pub n_channels: usize,
    /// Convolution width, odd.
    pub kernel_len: usize,
    pub accumulator_width: usize,
    pub head: HeadType,
    /// Ordinal rank R; 0 means "derive from the training data".
    #[serde(default)]
    pub rank: usize,
    pub dropout_rate: f64,
    /// Per-layer dilations for the N residual layers; empty means all 1.
    #[serde(default)]
    pub dilations: Vec<usize>,
}

impl Default for SylNetConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            n_layers: 10,
            n_channels: 128,
            kernel_len: 5,
            accumulator_width: 128,
            head: HeadType::Ordinal,
            rank: 0,
            dropout_rate: 0.5,
            dilations: Vec::new(),
        }
    }
}

impl SylNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers < 1 || self.n_channels < 1 || self.input_dim < 1 || self.accumulator_width < 1 {
            return bad("input_dim, n_layers, n_channels and accumulator_width must be >= 1".into());
        }
        if self.kernel_len % 2 == 0 {
            return bad(format!("kernel_len must be odd, got {}", self.kernel_len));
        }
        if self.head == HeadType::Ordinal && self.rank < 2 {
            return bad(format!("ordinal head needs rank >= 2, got {}", self.rank));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate));
        }
        if !self.dilations.is_empty() && (self.dilations.len() != self.n_layers || self.dilations.contains(&0)) {
            return bad("dilations must be empty or list one positive value per layer".into());
        }
        Ok(())
    }

    pub fn head_kind(&self) -> Head {
        match self.head {
            HeadType::Scalar => Head::Scalar,
            HeadType::Ordinal => Head::Ordinal { rank: self.rank },
        }
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilations.get(layer).copied().unwrap_or(1)
    }
}

/// Frames spanned by one pre-accumulator activation: the input convolution,
/// the N residual convolutions and the PostNet convolution each widen it by
/// `(kernel_len - 1)·dilation`.
pub fn receptive_field(config: &SylNetConfig) -> usize {
    let taps: usize = 2 + (0..config.n_layers).map(|l| config.dilation(l)).sum::<usize>();
    1 + taps * (config.kernel_len - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualLayer {
    pub conv: GatedConv,
    pub residual: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PostNet {
    /// One layer-specific projection per residual layer.
    pub skips: Vec<Affine>,
    pub conv: Affine,
    pub accumulator: Lstm,
    pub head: Affine,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SylNetParams {
    pub config: SylNetConfig,
    pub input: GatedConv,
    pub layers: Vec<ResidualLayer>,
    pub postnet: PostNet,
}

/// Initializes all weights from a fan-in scaled uniform distribution; biases are zero.
pub fn init_params(config: &SylNetConfig, seed: u64) -> Result<SylNetParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, w) = (config.n_channels, config.kernel_len);
    let input = GatedConv::new(&mut rng, config.input_dim, k, w, 1);
    let layers = (0..config.n_layers)
        .map(|l| ResidualLayer {
            conv: GatedConv::new(&mut rng, k, k, w, config.dilation(l)),
            residual: Affine::new(&mut rng, k, k),
        })
        .collect();
    let skips = (0..config.n_layers).map(|_| Affine::new(&mut rng, k, k)).collect();
    let postnet = PostNet {
        skips,
        conv: Affine::new(&mut rng, w * k, k),
        accumulator: Lstm::new(&mut rng, k, config.accumulator_width),
        head: Affine::new(&mut rng, config.accumulator_width, config.head_kind().width()),
    };
    Ok(SylNetParams {
        config: config.clone(),
        input,
        layers,
        postnet,
    })
}

impl ParamSet for SylNetParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        self.input.collect("input", &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            l.conv.collect(&format!("layers.{i}.conv"), &mut out);
            l.residual.collect(&format!("layers.{i}.residual"), &mut out);
        }
        for (i, s) in self.postnet.skips.iter().enumerate() {
            s.collect(&format!("postnet.skip.{i}"), &mut out);
        }
        self.postnet.conv.collect("postnet.conv", &mut out);
        self.postnet.accumulator.collect("postnet.accumulator", &mut out);
        self.postnet.head.collect("postnet.head", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        self.input.collect_mut(&mut out);
        for l in &mut self.layers {
            l.conv.collect_mut(&mut out);
            l.residual.collect_mut(&mut out);
        }
        for s in &mut self.postnet.skips {
            s.collect_mut(&mut out);
        }
        self.postnet.conv.collect_mut(&mut out);
        self.postnet.accumulator.collect_mut(&mut out);
        self.postnet.head.collect_mut(&mut out);
        out
    }
}

/// Disjoint, exhaustive split of tensor names into the convolution stack and the PostNet.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub conv_stack: Vec<String>,
    pub postnet: Vec<String>,
}

pub fn partition_params(params: &SylNetParams) -> ParamPartition {
    let (conv_stack, postnet) = crate::model::split_by_mask(params, &params.adaptation_mask());
    ParamPartition { conv_stack, postnet }
}

struct LayerTape {
    gated: GatedTape,
    mask: Option<Mat>,
    /// Gated output after dropout; input of both the residual and the skip projection.
    out: Mat,
}

pub struct SylNetTape {
    input: GatedTape,
    input_mask: Option<Mat>,
    layers: Vec<LayerTape>,
    post_cols: Mat,
    post_pre: Mat,
    relu_mask: Option<Mat>,
    accumulator: LstmTape,
    hidden_mask: Option<Mat>,
    hidden_last: Vec<f64>,
    head_last: Vec<f64>,
}

fn apply_mask(x: Mat, mask: &Option<Mat>) -> Mat {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

impl SylNetParams {
    fn check_input(&self, features: &Mat) -> Result<()> {
        if features.ncols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "features have {} bands, model expects {}",
                features.ncols(),
                self.config.input_dim
            )));
        }
        if features.nrows() == 0 {
            return Err(Error::Shape("empty feature matrix".into()));
        }
        Ok(())
    }

    /// Activations entering the accumulator (after the PostNet rectifier), in
    /// inference mode. Used to probe temporal locality of the convolution stack.
    pub fn pre_accumulator(&self, features: &Mat) -> Result<Mat> {
        self.check_input(features)?;
        let (z, _) = self.input.forward(features);
        let mut a = z;
        let mut skip_sum = Mat::zeros(a.raw_dim());
        for (layer, skip) in self.layers.iter().zip(&self.postnet.skips) {
            let (z, _) = layer.conv.forward(&a);
            a = &a + &layer.residual.forward(&z);
            skip_sum += &skip.forward(&z);
        }
        let cols = im2col(&skip_sum, self.config.kernel_len, 1);
        Ok(self.postnet.conv.forward(&cols).mapv_into(|v| v.max(0.0)))
    }
}

impl CountModel for SylNetParams {
    type Tape = SylNetTape;

    fn head(&self) -> Head {
        self.config.head_kind()
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn forward_tape(&self, features: &Mat, mut dropout: Option<Dropout<'_>>) -> Result<(ForwardTrace, SylNetTape)> {
        self.check_input(features)?;
        let frames = features.nrows();
        let k = self.config.n_channels;
        let mut mask = |cols: usize| dropout.as_mut().and_then(|d| d.mask(frames, cols));

        let (z, input_tape) = self.input.forward(features);
        let input_mask = mask(k);
        let mut a = apply_mask(z, &input_mask);
        check_finite(&a, "input gated convolution")?;

        let mut skip_sum = Mat::zeros((frames, k));
        let mut layer_tapes = Vec::with_capacity(self.layers.len());
        for (i, (layer, skip)) in self.layers.iter().zip(&self.postnet.skips).enumerate() {
            let (z, gated) = layer.conv.forward(&a);
            let m = mask(k);
            let out = apply_mask(z, &m);
            a = &a + &layer.residual.forward(&out);
            skip_sum += &skip.forward(&out);
            check_finite(&a, &format!("residual layer {i}"))?;
            layer_tapes.push(LayerTape { gated, mask: m, out });
        }

        let post_cols = im2col(&skip_sum, self.config.kernel_len, 1);
        let post_pre = self.postnet.conv.forward(&post_cols);
        check_finite(&post_pre, "postnet convolution")?;
        let relu_mask = mask(k);
        let rectified = apply_mask(post_pre.mapv(|v| v.max(0.0)), &relu_mask);

        let (hidden, accumulator) = self.postnet.accumulator.forward(&rectified);
        let hidden_mask = mask(self.config.accumulator_width);
        let hidden = apply_mask(hidden, &hidden_mask);
        check_finite(&hidden, "postnet accumulator")?;

        let mut out = self.postnet.head.forward(&hidden);
        if let Head::Ordinal { .. } = self.head() {
            out.mapv_inplace(sigmoid);
        }
        check_finite(&out, "postnet head")?;

        let tape = SylNetTape {
            input: input_tape,
            input_mask,
            layers: layer_tapes,
            post_cols,
            post_pre,
            relu_mask,
            accumulator,
            hidden_mask,
            hidden_last: hidden.row(frames - 1).to_vec(),
            head_last: out.row(frames - 1).to_vec(),
        };
        Ok((ForwardTrace::new(out), tape))
    }

    fn backward(&self, tape: &SylNetTape, d_final: &[f64], tunable_only: bool) -> SylNetParams {
        let mut grad = self.zeros_like();
        let frames = tape.post_pre.nrows();
        let (k, h) = (self.config.n_channels, self.config.accumulator_width);

        // head, final frame only
        let mut dy = d_final.to_vec();
        if let Head::Ordinal { .. } = self.head() {
            for (d, &o) in dy.iter_mut().zip(&tape.head_last) {
                *d *= o * (1.0 - o);
            }
        }
        let dy_row = Mat::from_shape_vec((1, dy.len()), dy).expect("head width");
        let h_row = Mat::from_shape_vec((1, h), tape.hidden_last.clone()).expect("hidden width");
        let dh_last = self.postnet.head.backward(&h_row, &dy_row, &mut grad.postnet.head);

        let mut d_hidden = Mat::zeros((frames, h));
        d_hidden.row_mut(frames - 1).assign(&dh_last.row(0));
        if let Some(m) = &tape.hidden_mask {
            d_hidden *= m;
        }
        let d_rect = self
            .postnet
            .accumulator
            .backward(&tape.accumulator, &d_hidden, &mut grad.postnet.accumulator, true)
            .expect("input gradient requested");
        let mut d_pre = apply_mask(d_rect, &tape.relu_mask);
        ndarray::Zip::from(&mut d_pre)
            .and(&tape.post_pre)
            .for_each(|d, &c| if c <= 0.0 { *d = 0.0 });
        let d_cols = self.postnet.conv.backward(&tape.post_cols, &d_pre, &mut grad.postnet.conv);
        let d_skip_sum = col2im(&d_cols, self.config.kernel_len, 1, k);

        let mut d_outs: Vec<Mat> = Vec::with_capacity(self.layers.len());
        for (i, lt) in tape.layers.iter().enumerate() {
            let skip = &self.postnet.skips[i];
            if tunable_only {
                skip.backward_params(&lt.out, &d_skip_sum, &mut grad.postnet.skips[i]);
            } else {
                d_outs.push(skip.backward(&lt.out, &d_skip_sum, &mut grad.postnet.skips[i]));
            }
        }
        if tunable_only {
            return grad;
        }

        // residual stack, top down; the last layer's residual output is unused
        let mut d_a = Mat::zeros((frames, k));
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let lt = &tape.layers[i];
            let mut d_out = std::mem::take(&mut d_outs[i]);
            d_out += &layer.residual.backward(&lt.out, &d_a, &mut grad.layers[i].residual);
            let dz = apply_mask(d_out, &lt.mask);
            let dx = layer
                .conv
                .backward(&lt.gated, &dz, &mut grad.layers[i].conv, true)
                .expect("input gradient requested");
            d_a += &dx;
        }
        let dz0 = apply_mask(d_a, &tape.input_mask);
        self.input.backward(&tape.input, &dz0, &mut grad.input, false);
        grad
    }

    fn adaptation_mask(&self) -> Vec<bool> {
        self.tensors().iter().map(|(n, _)| n.starts_with("postnet.")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny(head: HeadType) -> SylNetConfig {
        SylNetConfig {
            input_dim: 3,
            n_layers: 2,
            n_channels: 4,
            kernel_len: 3,
            accumulator_width: 4,
            head,
            rank: if head == HeadType::Ordinal { 5 } else { 0 },
            dropout_rate: 0.5,
            dilations: Vec::new(),
        }
    }

    #[test]
    fn receptive_field_formula() {
        let mut c = SylNetConfig::default();
        assert_eq!(receptive_field(&c), 49);
        c.n_layers = 1;
        c.kernel_len = 1;
        assert_eq!(receptive_field(&c), 1);
        c.n_layers = 2;
        c.kernel_len = 3;
        assert_eq!(receptive_field(&c), 9);
        c.dilations = vec![1, 4];
        assert_eq!(receptive_field(&c), 1 + 2 * (2 + 5));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(HeadType::Ordinal);
        assert!(c.validate().is_ok());
        c.rank = 1;
        assert!(c.validate().is_err());
        let mut c = tiny(HeadType::Scalar);
        c.kernel_len = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_deterministic_and_biases_zero_except_forget_gate() {
        let c = tiny(HeadType::Scalar);
        let a = init_params(&c, 9).unwrap();
        assert_eq!(a, init_params(&c, 9).unwrap());
        assert_ne!(a, init_params(&c, 10).unwrap());
        for (name, t) in a.tensors() {
            if name == "postnet.accumulator.input.bias" {
                let h = c.accumulator_width;
                for (j, &v) in t.iter().enumerate() {
                    let expected = if (h..2 * h).contains(&j) { crate::nn::FORGET_BIAS } else { 0.0 };
                    assert_eq!(v, expected, "{name}[{j}]");
                }
            } else if name.ends_with("bias") {
                assert!(t.iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn parameter_count_closed_form() {
        let c = SylNetConfig {
            input_dim: 24,
            n_layers: 2,
            n_channels: 4,
            kernel_len: 3,
            accumulator_width: 4,
            head: HeadType::Scalar,
            rank: 0,
            dropout_rate: 0.0,
            dilations: vec![],
        };
        // input gated conv: 2 × (3·24·4 + 4) = 584
        // per layer: gated 2 × (3·4·4 + 4) = 104, residual 20, skip 20  → 2 × 144 = 288
        // postnet conv 3·4·4 + 4 = 52; LSTM 4·4·4 + 4·4 + 4·4·4 = 144; head 4 + 1 = 5
        assert_eq!(init_params(&c, 0).unwrap().num_params(), 584 + 288 + 52 + 144 + 5);
    }

    #[test]
    fn ordinal_head_width() {
        let mut c = tiny(HeadType::Ordinal);
        c.rank = 11;
        let p = init_params(&c, 1).unwrap();
        assert_eq!(p.postnet.head.output_dim(), 10);
    }

    #[test]
    fn default_postnet_is_small_fraction() {
        let p = init_params(
            &SylNetConfig {
                rank: 20,
                ..SylNetConfig::default()
            },
            0,
        )
        .unwrap();
        let part = partition_params(&p);
        let sizes: std::collections::HashMap<String, usize> =
            p.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
        let post: usize = part.postnet.iter().map(|n| sizes[n]).sum();
        let total = p.num_params();
        assert!((post as f64) < 0.2 * total as f64, "{post} / {total}");
    }

    #[test]
    fn partition_is_disjoint_and_exhaustive() {
        let p = init_params(&tiny(HeadType::Ordinal), 2).unwrap();
        let part = partition_params(&p);
        let all: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        let mut union: Vec<String> = part.conv_stack.iter().chain(&part.postnet).cloned().collect();
        union.sort();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(union, sorted);
        assert!(part.conv_stack.iter().all(|n| !part.postnet.contains(n)));
        assert!(part.postnet.iter().any(|n| n.starts_with("postnet.skip.")));
        assert!(part.conv_stack.iter().any(|n| n.starts_with("layers.")));
    }

    #[test]
    fn zero_head_returns_bias() {
        let mut p = init_params(&tiny(HeadType::Scalar), 3).unwrap();
        p.postnet.head.weight.fill(0.0);
        p.postnet.head.bias[[0, 0]] = 2.75;
        let x = array![[0.1, -0.4, 2.0], [1.0, 0.0, -1.0]];
        assert_eq!(p.forward(&x).unwrap().final_estimate(), &[2.75]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let p = init_params(&tiny(HeadType::Scalar), 3).unwrap();
        assert!(p.forward(&Mat::zeros((5, 4))).is_err());
        assert!(p.forward(&Mat::zeros((0, 3))).is_err());
    }

    #[test]
    fn padding_never_changes_estimate() {
        let p = init_params(&tiny(HeadType::Ordinal), 4).unwrap();
        let x = Mat::from_shape_fn((6, 3), |(t, d)| ((t * 3 + d) as f64 * 0.37).sin());
        let mut padded = Mat::zeros((10, 3));
        padded.slice_mut(ndarray::s![..6, ..]).assign(&x);
        let direct = p.forward(&x).unwrap();
        let via_pad = p.forward_padded(&padded, 6).unwrap();
        assert_eq!(direct, via_pad);
    }

    /// Hand-evaluated forward pass of a pointwise network (N=1, K=2, w=1, one
    /// accumulator cell) on three frames.
    #[test]
    fn tiny_network_matches_hand_composition() {
        let c = SylNetConfig {
            input_dim: 2,
            n_layers: 1,
            n_channels: 2,
            kernel_len: 1,
            accumulator_width: 1,
            head: HeadType::Scalar,
            rank: 0,
            dropout_rate: 0.0,
            dilations: vec![],
        };
        let p = init_params(&c, 17).unwrap();
        let x = [[0.5, -1.0], [1.5, 0.25], [-0.75, 2.0]];
        let feats = Mat::from_shape_fn((3, 2), |(t, d)| x[t][d]);

        let aff = |a: &Affine, v: &[f64]| -> Vec<f64> {
            (0..a.output_dim())
                .map(|o| a.bias[[0, o]] + v.iter().enumerate().map(|(i, vi)| vi * a.weight[[i, o]]).sum::<f64>())
                .collect()
        };
        let gated = |g: &GatedConv, v: &[f64]| -> Vec<f64> {
            let f = aff(&g.filter, v);
            let s = aff(&g.gate, v);
            f.iter().zip(&s).map(|(f, s)| f.tanh() * (1.0 / (1.0 + (-s).exp()))).collect()
        };
        let lstm = &p.postnet.accumulator;
        let (mut hp, mut cp) = (0.0f64, 0.0f64);
        let mut last = 0.0;
        for row in &x {
            let a0 = gated(&p.input, row);
            let z1 = gated(&p.layers[0].conv, &a0);
            let skip = aff(&p.postnet.skips[0], &z1);
            let r: Vec<f64> = aff(&p.postnet.conv, &skip).iter().map(|v| v.max(0.0)).collect();
            let pre: Vec<f64> = aff(&lstm.input, &r)
                .iter()
                .enumerate()
                .map(|(g, v)| v + hp * lstm.recurrent[[0, g]])
                .collect();
            let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
            cp = sg(pre[1]) * cp + sg(pre[0]) * pre[2].tanh();
            hp = sg(pre[3]) * cp.tanh();
            last = aff(&p.postnet.head, &[hp])[0];
        }
        let got = p.forward(&feats).unwrap().final_estimate()[0];
        assert!((got - last).abs() < 1e-13, "{got} vs {last}");
    }
}

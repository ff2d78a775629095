//! BLSTM-count: stacked bidirectional LSTMs followed by a forward LSTM whose
//! linear readout at the last frame is the count estimate.

use ndarray::{concatenate, s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{check_finite, CountModel, Dropout, ForwardTrace, Head};
use crate::nn::{reversed_rows, Affine, Collect, Lstm, LstmTape, Mat, ParamSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlstmCountConfig {
    pub input_dim: usize,
    pub cells_per_direction: usize,
    pub n_bidirectional_layers: usize,
    pub dropout_rate: f64,
}

impl Default for BlstmCountConfig {
    fn default() -> Self {
        Self {
            input_dim: 24,
            cells_per_direction: 60,
            n_bidirectional_layers: 2,
            dropout_rate: 0.5,
        }
    }
}

impl BlstmCountConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.cells_per_direction < 1 || self.n_bidirectional_layers < 1 {
            return Err(Error::Config(
                "input_dim, cells_per_direction and n_bidirectional_layers must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiLayer {
    pub forward: Lstm,
    pub backward: Lstm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlstmCountParams {
    pub config: BlstmCountConfig,
    pub bidirectional: Vec<BiLayer>,
    /// Final forward recurrent layer; retrained together with `readout` during adaptation.
    pub output: Lstm,
    pub readout: Affine,
}

pub fn init_blstm(config: &BlstmCountConfig, seed: u64) -> Result<BlstmCountParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.cells_per_direction;
    let mut input = config.input_dim;
    let mut bidirectional = Vec::new();
    for _ in 0..config.n_bidirectional_layers {
        bidirectional.push(BiLayer {
            forward: Lstm::new(&mut rng, input, h),
            backward: Lstm::new(&mut rng, input, h),
        });
        input = 2 * h;
    }
    Ok(BlstmCountParams {
        config: config.clone(),
        bidirectional,
        output: Lstm::new(&mut rng, input, h),
        readout: Affine::new(&mut rng, h, 1),
    })
}

impl ParamSet for BlstmCountParams {
    fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (i, l) in self.bidirectional.iter().enumerate() {
            l.forward.collect(&format!("bidirectional.{i}.forward"), &mut out);
            l.backward.collect(&format!("bidirectional.{i}.backward"), &mut out);
        }
        self.output.collect("output", &mut out);
        self.readout.collect("readout", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = Vec::new();
        for l in &mut self.bidirectional {
            l.forward.collect_mut(&mut out);
            l.backward.collect_mut(&mut out);
        }
        self.output.collect_mut(&mut out);
        self.readout.collect_mut(&mut out);
        out
    }
}

/// (frozen, tunable) tensor names: only the final recurrent layer and its readout are tunable.
pub fn blstm_adapt_partition(params: &BlstmCountParams) -> (Vec<String>, Vec<String>) {
    crate::model::split_by_mask(params, &params.adaptation_mask())
}

struct BiTape {
    forward: LstmTape,
    backward: LstmTape,
    mask: Option<Mat>,
}

pub struct BlstmTape {
    layers: Vec<BiTape>,
    output: LstmTape,
    hidden_mask: Option<Mat>,
    hidden_last: Vec<f64>,
}

fn apply_mask(x: Mat, mask: &Option<Mat>) -> Mat {
    match mask {
        Some(m) => x * m,
        None => x,
    }
}

impl CountModel for BlstmCountParams {
    type Tape = BlstmTape;

    fn head(&self) -> Head {
        Head::Scalar
    }

    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn forward_tape(&self, features: &Mat, mut dropout: Option<Dropout<'_>>) -> Result<(ForwardTrace, BlstmTape)> {
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
        let frames = features.nrows();
        let h = self.config.cells_per_direction;
        let mut x = features.clone();
        let mut tapes = Vec::with_capacity(self.bidirectional.len());
        for (i, layer) in self.bidirectional.iter().enumerate() {
            let (hf, tf) = layer.forward.forward(&x);
            let (hb_rev, tb) = layer.backward.forward(&reversed_rows(&x));
            let hb = reversed_rows(&hb_rev);
            let mask = dropout.as_mut().and_then(|d| d.mask(frames, 2 * h));
            x = apply_mask(concatenate![Axis(1), hf, hb], &mask);
            check_finite(&x, &format!("bidirectional layer {i}"))?;
            tapes.push(BiTape {
                forward: tf,
                backward: tb,
                mask,
            });
        }
        let (hidden, output) = self.output.forward(&x);
        let hidden_mask = dropout.as_mut().and_then(|d| d.mask(frames, h));
        let hidden = apply_mask(hidden, &hidden_mask);
        let out = self.readout.forward(&hidden);
        check_finite(&out, "output layer")?;
        let tape = BlstmTape {
            layers: tapes,
            output,
            hidden_mask,
            hidden_last: hidden.row(frames - 1).to_vec(),
        };
        Ok((ForwardTrace::new(out), tape))
    }

    fn backward(&self, tape: &BlstmTape, d_final: &[f64], tunable_only: bool) -> BlstmCountParams {
        let mut grad = self.zeros_like();
        let h = self.config.cells_per_direction;
        let frames = tape.output.hidden().nrows();
        let h_row = Mat::from_shape_vec((1, h), tape.hidden_last.clone()).expect("hidden width");
        let dy = Mat::from_elem((1, 1), d_final[0]);
        let dh_last = self.readout.backward(&h_row, &dy, &mut grad.readout);
        let mut d_hidden = Mat::zeros((frames, h));
        d_hidden.row_mut(frames - 1).assign(&dh_last.row(0));
        let d_hidden = apply_mask(d_hidden, &tape.hidden_mask);
        let dx = self.output.backward(&tape.output, &d_hidden, &mut grad.output, !tunable_only);
        let Some(mut dx) = dx else {
            return grad;
        };
        for i in (0..self.bidirectional.len()).rev() {
            let layer = &self.bidirectional[i];
            let lt = &tape.layers[i];
            let d_out = apply_mask(dx, &lt.mask);
            let need = i > 0;
            let dhf = d_out.slice(s![.., ..h]).to_owned();
            let dhb_rev = reversed_rows(&d_out.slice(s![.., h..]).to_owned());
            let gf = layer.forward.backward(&lt.forward, &dhf, &mut grad.bidirectional[i].forward, need);
            let gb = layer.backward.backward(&lt.backward, &dhb_rev, &mut grad.bidirectional[i].backward, need);
            match (gf, gb) {
                (Some(f), Some(b)) => dx = f + reversed_rows(&b),
                _ => break,
            }
        }
        grad
    }

    fn adaptation_mask(&self) -> Vec<bool> {
        self.tensors()
            .iter()
            .map(|(n, _)| n.starts_with("output.") || n.starts_with("readout."))
            .collect()
    }
}

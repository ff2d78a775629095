//! Training objectives for count regression and ordinal count classification.
//!
//! Both losses are relative: each utterance's error is divided by its true
//! syllable count, so long utterances do not dominate a minibatch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ForwardTrace, Head};

/// Which loss drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1Relative,
    Ordinal,
}

/// How the ordinal loss reduces the per-utterance deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinalForm {
    /// `‖ô − o‖₂`
    #[default]
    Euclidean,
    /// `sqrt(max(0, ‖ô‖² − ‖o‖²))`, the formula taken literally with negative
    /// radicands clamped.
    LiteralClamped,
}

impl LossKind {
    pub fn compatible_with(self, head: Head) -> bool {
        matches!(
            (self, head),
            (LossKind::L1Relative, Head::Scalar) | (LossKind::Ordinal, Head::Ordinal { .. })
        )
    }
}

/// Cumulative binary encoding of a count: entry `r` (0-based) is 1 iff `count > r`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrdinalTarget {
    pub bits: Vec<f64>,
    pub count: u32,
    pub rank: usize,
}

pub fn encode_ordinal(count: u32, rank: usize) -> Result<OrdinalTarget> {
    if count < 1 {
        return Err(Error::InvalidInput("ordinal target count must be >= 1".into()));
    }
    if rank < 2 {
        return Err(Error::InvalidInput(format!("ordinal rank must be >= 2, got {rank}")));
    }
    let bits = (0..rank - 1)
        .map(|r| if count as usize > r { 1.0 } else { 0.0 })
        .collect();
    Ok(OrdinalTarget { bits, count, rank })
}

/// Number of activations strictly above 0.5. Total over non-monotone vectors.
pub fn decode_ordinal(activations: &[f64]) -> u32 {
    activations.iter().filter(|&&a| a > 0.5).count() as u32
}

#[derive(Clone, Debug, PartialEq)]
pub enum BatchPrediction {
    Scalar { estimates: Vec<f64>, targets: Vec<u32> },
    Ordinal { activations: Vec<Vec<f64>>, targets: Vec<u32> },
}

impl BatchPrediction {
    pub fn targets(&self) -> &[u32] {
        match self {
            BatchPrediction::Scalar { targets, .. } | BatchPrediction::Ordinal { targets, .. } => targets,
        }
    }
}

fn check_targets(targets: &[u32], predictions: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if targets.len() != predictions {
        return Err(Error::Shape(format!(
            "{predictions} predictions for {} targets",
            targets.len()
        )));
    }
    if targets.iter().any(|&s| s == 0) {
        return Err(Error::InvalidInput("target syllable count 0".into()));
    }
    Ok(())
}

/// `(1/M) Σ |ŝ_u − s_u| / s_u`
pub fn l1_relative_loss(batch: &BatchPrediction) -> Result<f64> {
    let BatchPrediction::Scalar { estimates, targets } = batch else {
        return Err(Error::InvalidInput("l1 relative loss needs a scalar-head batch".into()));
    };
    check_targets(targets, estimates.len())?;
    let m = targets.len() as f64;
    Ok(estimates
        .iter()
        .zip(targets)
        .map(|(&e, &s)| (e - s as f64).abs() / s as f64)
        .sum::<f64>()
        / m)
}

/// `(1/M) Σ ‖ô_u − o_u‖₂ / s_u` (or the literal clamped variant).
pub fn ordinal_loss(batch: &BatchPrediction, encoded: &[OrdinalTarget], form: OrdinalForm) -> Result<f64> {
    let BatchPrediction::Ordinal { activations, targets } = batch else {
        return Err(Error::InvalidInput("ordinal loss needs an ordinal-head batch".into()));
    };
    check_targets(targets, activations.len())?;
    if encoded.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} encoded targets for a batch of {}",
            encoded.len(),
            targets.len()
        )));
    }
    let m = targets.len() as f64;
    let mut total = 0.0;
    for ((act, enc), &s) in activations.iter().zip(encoded).zip(targets) {
        if act.len() != enc.bits.len() {
            return Err(Error::Shape(format!(
                "activation width {} vs target width {}",
                act.len(),
                enc.bits.len()
            )));
        }
        if act.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidInput("ordinal activations must lie in [0, 1]".into()));
        }
        total += ordinal_term(act, &enc.bits, form).0 / s as f64;
    }
    Ok(total / m)
}

/// Value and gradient (w.r.t. the activations) of one utterance's unscaled
/// ordinal deviation.
fn ordinal_term(act: &[f64], bits: &[f64], form: OrdinalForm) -> (f64, Vec<f64>) {
    match form {
        OrdinalForm::Euclidean => {
            let norm = act
                .iter()
                .zip(bits)
                .map(|(a, o)| (a - o) * (a - o))
                .sum::<f64>()
                .sqrt();
            let grad = if norm > 0.0 {
                act.iter().zip(bits).map(|(a, o)| (a - o) / norm).collect()
            } else {
                vec![0.0; act.len()]
            };
            (norm, grad)
        }
        OrdinalForm::LiteralClamped => {
            let radicand = act.iter().map(|a| a * a).sum::<f64>() - bits.iter().map(|o| o * o).sum::<f64>();
            if radicand > 0.0 {
                let root = radicand.sqrt();
                (root, act.iter().map(|a| a / root).collect())
            } else {
                (0.0, vec![0.0; act.len()])
            }
        }
    }
}

/// Loss over final-frame model outputs plus its gradient with respect to each
/// final output vector. This is the single entry point used by training.
pub fn loss_and_grad(
    kind: LossKind,
    form: OrdinalForm,
    finals: &[&[f64]],
    targets: &[u32],
    rank: Option<usize>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_targets(targets, finals.len())?;
    let m = targets.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(finals.len());
    match kind {
        LossKind::L1Relative => {
            for (out, &s) in finals.iter().zip(targets) {
                let s = s as f64;
                let diff = out[0] - s;
                loss += diff.abs() / s;
                let g = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                grads.push(vec![g / (s * m)]);
            }
        }
        LossKind::Ordinal => {
            let rank = rank.ok_or_else(|| Error::InvalidInput("ordinal loss needs a rank".into()))?;
            for (out, &s) in finals.iter().zip(targets) {
                let enc = encode_ordinal(s, rank)?;
                if out.len() != enc.bits.len() {
                    return Err(Error::Shape(format!(
                        "head width {} vs rank-1 = {}",
                        out.len(),
                        enc.bits.len()
                    )));
                }
                let (v, g) = ordinal_term(out, &enc.bits, form);
                let scale = 1.0 / (s as f64 * m);
                loss += v / s as f64;
                grads.push(g.into_iter().map(|x| x * scale).collect());
            }
        }
    }
    Ok((loss / m, grads))
}

/// Loss computed from forward traces. Only the final frame of each trace is read.
pub fn loss_from_traces(
    kind: LossKind,
    form: OrdinalForm,
    traces: &[ForwardTrace],
    targets: &[u32],
    rank: Option<usize>,
) -> Result<f64> {
    let finals: Vec<&[f64]> = traces.iter().map(|t| t.final_estimate()).collect();
    Ok(loss_and_grad(kind, form, &finals, targets, rank)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(est: &[f64], tgt: &[u32]) -> BatchPrediction {
        BatchPrediction::Scalar {
            estimates: est.to_vec(),
            targets: tgt.to_vec(),
        }
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_relative_loss(&scalar(&[3.0], &[3])).unwrap(), 0.0);
        assert_eq!(l1_relative_loss(&scalar(&[2.0], &[4])).unwrap(), 0.5);
        // term by term: 1/2 + 0/5 + 2/8 = 0.75, mean 0.25
        let v = l1_relative_loss(&scalar(&[3.0, 5.0, 10.0], &[2, 5, 8])).unwrap();
        assert!((v - 0.25).abs() < 1e-15);
    }

    #[test]
    fn l1_errors() {
        assert!(l1_relative_loss(&scalar(&[1.0], &[0])).is_err());
        let ord = BatchPrediction::Ordinal {
            activations: vec![vec![0.5]],
            targets: vec![1],
        };
        assert!(l1_relative_loss(&ord).is_err());
    }

    #[test]
    fn encode_examples() {
        let t = encode_ordinal(3, 11).unwrap();
        assert_eq!(t.bits, vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(encode_ordinal(1, 2).unwrap().bits, vec![1.0]);
        assert!(encode_ordinal(12, 11).unwrap().bits.iter().all(|&b| b == 1.0));
        assert!(encode_ordinal(0, 5).is_err());
        assert!(encode_ordinal(3, 1).is_err());
    }

    #[test]
    fn decode_examples() {
        assert_eq!(decode_ordinal(&[0.9, 0.8, 0.6, 0.2, 0.1]), 3);
        assert_eq!(decode_ordinal(&[0.49; 6]), 0);
        assert_eq!(decode_ordinal(&[0.9, 0.2, 0.9]), 2);
        assert_eq!(decode_ordinal(&[0.5]), 0);
    }

    #[test]
    fn ordinal_examples() {
        let enc = vec![encode_ordinal(1, 3).unwrap()];
        let perfect = BatchPrediction::Ordinal {
            activations: vec![vec![1.0, 0.0]],
            targets: vec![1],
        };
        assert_eq!(ordinal_loss(&perfect, &enc, OrdinalForm::Euclidean).unwrap(), 0.0);
        let half = BatchPrediction::Ordinal {
            activations: vec![vec![0.5, 0.5]],
            targets: vec![1],
        };
        let v = ordinal_loss(&half, &enc, OrdinalForm::Euclidean).unwrap();
        assert!((v - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ordinal_count_scaling() {
        let acts = vec![0.3, 0.6, 0.1, 0.9];
        let one = |s: u32| {
            let b = BatchPrediction::Ordinal {
                activations: vec![acts.clone()],
                targets: vec![s],
            };
            // same bits for both, only the 1/s weight differs
            let enc = vec![OrdinalTarget {
                bits: vec![1.0, 1.0, 0.0, 0.0],
                count: s,
                rank: 5,
            }];
            ordinal_loss(&b, &enc, OrdinalForm::Euclidean).unwrap()
        };
        assert!((one(2) - 2.0 * one(4)).abs() < 1e-15);
    }

    #[test]
    fn ordinal_rejects_bad_inputs() {
        let enc = vec![encode_ordinal(1, 3).unwrap()];
        let wide = BatchPrediction::Ordinal {
            activations: vec![vec![0.5, 0.5, 0.5]],
            targets: vec![1],
        };
        assert!(ordinal_loss(&wide, &enc, OrdinalForm::Euclidean).is_err());
        let out_of_range = BatchPrediction::Ordinal {
            activations: vec![vec![1.5, 0.5]],
            targets: vec![1],
        };
        assert!(ordinal_loss(&out_of_range, &enc, OrdinalForm::Euclidean).is_err());
    }

    #[test]
    fn literal_form_clamps_negative_radicand() {
        let enc = vec![encode_ordinal(2, 3).unwrap()];
        let b = BatchPrediction::Ordinal {
            activations: vec![vec![0.2, 0.1]],
            targets: vec![2],
        };
        assert_eq!(ordinal_loss(&b, &enc, OrdinalForm::LiteralClamped).unwrap(), 0.0);
        assert!(ordinal_loss(&b, &enc, OrdinalForm::Euclidean).unwrap() > 0.0);
    }

    #[test]
    fn grads_match_finite_differences() {
        let outs = [vec![0.3, 0.7, 0.2], vec![0.9, 0.4, 0.55]];
        let targets = [2, 1];
        for form in [OrdinalForm::Euclidean, OrdinalForm::LiteralClamped] {
            let finals: Vec<&[f64]> = outs.iter().map(|v| v.as_slice()).collect();
            let (_, g) = loss_and_grad(LossKind::Ordinal, form, &finals, &targets, Some(4)).unwrap();
            for u in 0..2 {
                for r in 0..3 {
                    let eval = |d: f64| {
                        let mut o = outs.clone();
                        o[u][r] += d;
                        let f: Vec<&[f64]> = o.iter().map(|v| v.as_slice()).collect();
                        loss_and_grad(LossKind::Ordinal, form, &f, &targets, Some(4)).unwrap().0
                    };
                    let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
                    assert!((fd - g[u][r]).abs() < 1e-7, "{form:?} {u} {r}");
                }
            }
        }
    }
}

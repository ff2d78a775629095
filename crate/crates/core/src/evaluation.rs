//! Relative-error metric, the adaptation-curve experiment and per-frame
//! accumulation traces.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::read_wav;
use crate::checkpoint::{AnyModel, ModelConfig};
use crate::corpus::{CorpusManifest, SplitPlan, Utterance};
use crate::envelope::{apply_calibration, recalibrate, BandEnergyEnvelope, Envelope, EnvelopeCalibration, EnvelopeEstimator};
use crate::error::{Error, Result};
use crate::features::{FeatureCache, FeatureConfig};
use crate::nn::Mat;
use crate::seed::child_seed;
use crate::training::{load_samples, Sample, TrainConfig};

/// 100 × mean(|max(ŝ, 0) − s| / s).
pub fn relative_error_pct(predictions: &[f64], targets: &[u32]) -> Result<f64> {
    if predictions.len() != targets.len() || targets.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if targets.contains(&0) {
        return Err(Error::InvalidInput("targets must be >= 1".into()));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &s)| (p.max(0.0) - s as f64).abs() / s as f64)
        .sum();
    Ok(100.0 * sum / targets.len() as f64)
}

/// A counting method under test, already trained or calibrated on source data.
#[derive(Clone, Debug)]
pub enum Method {
    Neural {
        name: String,
        model: AnyModel,
        features: FeatureConfig,
        adapt: TrainConfig,
    },
    Envelope {
        name: String,
        estimator: BandEnergyEnvelope,
        source: EnvelopeCalibration,
        grid: Vec<f64>,
    },
}

impl Method {
    pub fn name(&self) -> &str {
        match self {
            Method::Neural { name, .. } | Method::Envelope { name, .. } => name,
        }
    }

    fn info(&self) -> MethodInfo {
        match self {
            Method::Neural {
                name,
                model,
                features,
                adapt,
            } => MethodInfo {
                name: name.clone(),
                kind: model.kind().into(),
                config: serde_json::json!({
                    "model": model.config(),
                    "features": features,
                    "adapt": adapt,
                }),
                saturated_test_utterances: 0,
            },
            Method::Envelope {
                name,
                estimator,
                source,
                grid,
            } => MethodInfo {
                name: name.clone(),
                kind: "envelope".into(),
                config: serde_json::json!({
                    "envelope": estimator.config,
                    "fingerprint": estimator.fingerprint(),
                    "source": source,
                    "grid_len": grid.len(),
                }),
                saturated_test_utterances: 0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub name: String,
    pub kind: String,
    pub config: serde_json::Value,
    /// Test utterances whose count exceeds what an ordinal head can express.
    pub saturated_test_utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub size_label: String,
    /// 0 for the unadapted model.
    pub size_s: f64,
    pub fold: usize,
    pub error_pct: Option<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub size_label: String,
    pub size_s: f64,
    pub mean_pct: f64,
    /// Sample standard deviation over the folds that produced a value.
    pub std_pct: f64,
    pub n_folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub corpus: String,
    pub split_seed: u64,
    pub folds: usize,
    pub n_test: usize,
    pub methods: Vec<MethodInfo>,
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
}

pub const UNADAPTED_LABEL: &str = "0s";

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Mean and spread per (method, size), in first-appearance order.
pub fn aggregate(cells: &[Cell]) -> Vec<Aggregate> {
    let mut keys: Vec<(String, String, f64)> = Vec::new();
    for c in cells {
        let k = (c.method.clone(), c.size_label.clone(), c.size_s);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .filter_map(|(method, size_label, size_s)| {
            let values: Vec<f64> = cells
                .iter()
                .filter(|c| c.method == method && c.size_label == size_label)
                .filter_map(|c| c.error_pct)
                .collect();
            if values.is_empty() {
                return None;
            }
            let (mean_pct, std_pct) = mean_std(&values);
            Some(Aggregate {
                method,
                size_label,
                size_s,
                mean_pct,
                std_pct,
                n_folds: values.len(),
            })
        })
        .collect()
}

impl ExperimentReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads a report and checks that it is internally consistent.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: Self = serde_json::from_str(&text)?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::InvalidInput("report has no cells".into()));
        }
        for c in &self.cells {
            match (c.error_pct, &c.failure) {
                (Some(e), _) if !(e.is_finite() && e >= 0.0) => {
                    return Err(Error::InvalidInput(format!(
                        "cell ({}, {}, fold {}) has error {e}",
                        c.method, c.size_label, c.fold
                    )))
                }
                (None, None) => {
                    return Err(Error::InvalidInput(format!(
                        "cell ({}, {}, fold {}) has neither an error nor a failure",
                        c.method, c.size_label, c.fold
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn aggregate_for(&self, method: &str, size_label: &str) -> Option<&Aggregate> {
        self.aggregates
            .iter()
            .find(|a| a.method == method && a.size_label == size_label)
    }

    /// One row per cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,size_label,size_s,fold,error_pct,failure\n");
        for c in &self.cells {
            let err = c.error_pct.map(|e| e.to_string()).unwrap_or_default();
            let failure = c
                .failure
                .as_ref()
                .map(|f| format!("\"{}\"", f.replace('"', "\"\"")))
                .unwrap_or_default();
            out += &format!(
                "{},{},{},{},{err},{failure}\n",
                c.method, c.size_label, c.size_s, c.fold
            );
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentOptions {
    pub cache_dir: Option<PathBuf>,
}

enum Prepared {
    Neural(HashMap<String, Sample>),
    Envelope(HashMap<String, Envelope>),
}

fn prepare(method: &Method, utts: &[&Utterance], options: &ExperimentOptions, feature_sets: &mut HashMap<String, HashMap<String, Sample>>) -> Result<Prepared> {
    match method {
        Method::Neural { features, .. } => {
            let key = features.fingerprint();
            if !feature_sets.contains_key(&key) {
                let cache = match &options.cache_dir {
                    Some(d) => Some(FeatureCache::new(d, features)?),
                    None => None,
                };
                let samples = load_samples(utts, features, cache.as_ref())?;
                feature_sets.insert(key.clone(), samples.into_iter().map(|s| (s.id.clone(), s)).collect());
            }
            Ok(Prepared::Neural(feature_sets[&key].clone()))
        }
        Method::Envelope { estimator, .. } => {
            let envs = utts
                .par_iter()
                .map(|u| Ok((u.id.clone(), estimator.envelope(&read_wav(&u.audio_path)?, &u.id)?)))
                .collect::<Result<HashMap<_, _>>>()?;
            Ok(Prepared::Envelope(envs))
        }
    }
}

fn pick<'a, T>(map: &'a HashMap<String, T>, ids: &[String]) -> Vec<&'a T> {
    ids.iter().map(|i| &map[i]).collect()
}

fn evaluate_neural(model: &AnyModel, test: &[&Sample]) -> Result<f64> {
    let preds = test
        .par_iter()
        .map(|s| model.predict_count(&s.features))
        .collect::<Result<Vec<f64>>>()?;
    let targets: Vec<u32> = test.iter().map(|s| s.count).collect();
    relative_error_pct(&preds, &targets)
}

fn evaluate_envelope(cal: &EnvelopeCalibration, test: &[&Envelope], targets: &[u32]) -> Result<f64> {
    let preds: Vec<f64> = test.iter().map(|e| apply_calibration(e.peaks(cal.theta), cal)).collect();
    relative_error_pct(&preds, targets)
}

/// Adapts (or recalibrates) every method on every (size, fold) set of the
/// plan and evaluates on the fixed test set. The unadapted result is computed
/// once per method and repeated for each fold. Failing runs become cells with
/// a diagnostic instead of aborting the experiment.
pub fn run_adaptation_experiment(
    methods: &[Method],
    manifest: &CorpusManifest,
    plan: &SplitPlan,
    options: &ExperimentOptions,
) -> Result<ExperimentReport> {
    plan.validate(manifest)?;
    let folds = plan.folds();
    let mut needed: Vec<&str> = plan.test_ids.iter().map(String::as_str).collect();
    for set in &plan.adaptation_sets {
        needed.extend(set.ids.iter().map(String::as_str));
    }
    needed.sort_unstable();
    needed.dedup();
    let utts: Vec<&Utterance> = needed
        .iter()
        .map(|id| manifest.get(id).expect("plan validated against manifest"))
        .collect();
    let targets_of = |ids: &[String]| -> Vec<u32> {
        ids.iter().map(|i| manifest.get(i).expect("validated").syllable_count).collect()
    };
    let test_targets = targets_of(&plan.test_ids);

    let mut feature_sets = HashMap::new();
    let mut cells = Vec::new();
    let mut infos = Vec::new();
    for method in methods {
        let name = method.name().to_string();
        let mut info = method.info();
        let coords: Vec<(String, f64, usize)> = std::iter::once((UNADAPTED_LABEL.to_string(), 0.0, 0))
            .chain(plan.adaptation_sets.iter().map(|s| (s.size_label.clone(), s.size_s, s.fold)))
            .collect();
        let fail_all = |msg: String| -> Vec<Cell> {
            coords
                .iter()
                .flat_map(|(label, size, fold)| {
                    let folds: Vec<usize> = if *size == 0.0 { (0..folds).collect() } else { vec![*fold] };
                    folds.into_iter().map(|f| Cell {
                        method: name.clone(),
                        size_label: label.clone(),
                        size_s: *size,
                        fold: f,
                        error_pct: None,
                        failure: Some(msg.clone()),
                    })
                })
                .collect()
        };
        let prepared = match prepare(method, &utts, options, &mut feature_sets) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("{name}: data preparation failed: {e}");
                cells.extend(fail_all(format!("data preparation: {e}")));
                infos.push(info);
                continue;
            }
        };
        let run = |adapt_ids: Option<(&[String], u64)>| -> Result<f64> {
            match (method, &prepared) {
                (Method::Neural { model, adapt, .. }, Prepared::Neural(samples)) => {
                    let test = pick(samples, &plan.test_ids);
                    match adapt_ids {
                        None => evaluate_neural(model, &test),
                        Some((ids, seed)) => {
                            let set: Vec<Sample> = pick(samples, ids).into_iter().cloned().collect();
                            let cfg = TrainConfig {
                                seed,
                                ..adapt.clone()
                            };
                            let (adapted, _) = model.adapt(&set, &cfg)?;
                            evaluate_neural(&adapted, &test)
                        }
                    }
                }
                (Method::Envelope { source, grid, .. }, Prepared::Envelope(envs)) => {
                    let test: Vec<&Envelope> = pick(envs, &plan.test_ids);
                    let cal = match adapt_ids {
                        None => *source,
                        Some((ids, _)) => {
                            let set: Vec<Envelope> = pick(envs, ids).into_iter().cloned().collect();
                            recalibrate(&set, &targets_of(ids), grid, source)?.calibration
                        }
                    };
                    evaluate_envelope(&cal, &test, &test_targets)
                }
                _ => unreachable!("prepared data matches method"),
            }
        };
        let to_cell = |label: &str, size: f64, fold: usize, r: &Result<f64>| Cell {
            method: name.clone(),
            size_label: label.to_string(),
            size_s: size,
            fold,
            error_pct: r.as_ref().ok().copied(),
            failure: r.as_ref().err().map(|e| e.to_string()),
        };
        let unadapted = run(None);
        for fold in 0..folds {
            cells.push(to_cell(UNADAPTED_LABEL, 0.0, fold, &unadapted));
        }
        let adapted: Vec<Cell> = plan
            .adaptation_sets
            .par_iter()
            .map(|set| {
                let seed = child_seed(plan.seed, &format!("adapt/{name}/{}/{}", set.size_label, set.fold));
                let r = run(Some((&set.ids, seed)));
                if let Err(e) = &r {
                    log::warn!("{name} {} fold {}: {e}", set.size_label, set.fold);
                }
                to_cell(&set.size_label, set.size_s, set.fold, &r)
            })
            .collect();
        cells.extend(adapted);
        if let Some(rank) = method_rank(method) {
            info.saturated_test_utterances = test_targets.iter().filter(|&&c| c as usize > rank - 1).count();
        }
        infos.push(info);
    }
    let aggregates = aggregate(&cells);
    Ok(ExperimentReport {
        corpus: manifest.name.clone(),
        split_seed: plan.seed,
        folds,
        n_test: plan.test_ids.len(),
        methods: infos,
        cells,
        aggregates,
    })
}

fn method_rank(method: &Method) -> Option<usize> {
    match method {
        Method::Neural { model, .. } => match model.config() {
            ModelConfig::Sylnet(_) => model.head().rank(),
            ModelConfig::BlstmCount(_) => None,
        },
        Method::Envelope { .. } => None,
    }
}

/// Per-frame decoded count of one utterance, for accumulation plots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccumulationTrace {
    pub utterance_id: String,
    pub reference_count: Option<u32>,
    pub hop_ms: f64,
    pub decoded: Vec<f64>,
}

/// Applies the head decoding to every frame's output. The last element is
/// the utterance's predicted count.
pub fn trace_accumulation(model: &AnyModel, features: &Mat) -> Result<Vec<f64>> {
    let trace = model.forward(features)?;
    let head = model.head();
    Ok(trace
        .per_frame_head()
        .rows()
        .into_iter()
        .map(|r| head.decode(r.as_slice().expect("row-major trace")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error_pct(&[3.0, 5.0], &[3, 5]).unwrap(), 0.0);
        assert_eq!(relative_error_pct(&[2.0], &[4]).unwrap(), 50.0);
        // negative predictions count as zero
        assert_eq!(relative_error_pct(&[-3.0], &[4]).unwrap(), 100.0);
        assert!(relative_error_pct(&[1.0], &[1, 2]).is_err());
        assert!(relative_error_pct(&[1.0], &[0]).is_err());
    }

    fn cell(method: &str, label: &str, fold: usize, e: Option<f64>) -> Cell {
        Cell {
            method: method.into(),
            size_label: label.into(),
            size_s: if label == "0s" { 0.0 } else { 30.0 },
            fold,
            error_pct: e,
            failure: e.is_none().then(|| "boom".into()),
        }
    }

    #[test]
    fn aggregates_use_sample_std_and_skip_failures() {
        let cells = vec![
            cell("a", "30s", 0, Some(10.0)),
            cell("a", "30s", 1, Some(20.0)),
            cell("a", "30s", 2, None),
            cell("a", "30s", 3, Some(30.0)),
        ];
        let agg = aggregate(&cells);
        assert_eq!(agg.len(), 1);
        assert_eq!(agg[0].n_folds, 3);
        assert!((agg[0].mean_pct - 20.0).abs() < 1e-12);
        assert!((agg[0].std_pct - 10.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_cell() {
        let report = ExperimentReport {
            corpus: "c".into(),
            split_seed: 1,
            folds: 2,
            n_test: 3,
            methods: vec![],
            cells: vec![cell("a", "0s", 0, Some(1.5)), cell("a", "30s", 0, None)],
            aggregates: vec![],
        };
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.contains("a,30s,30,0,,\"boom\""));
        assert!(report.validate().is_ok());
    }

    #[test]
    fn empty_report_is_invalid() {
        let report = ExperimentReport {
            corpus: "c".into(),
            split_seed: 1,
            folds: 0,
            n_test: 0,
            methods: vec![],
            cells: vec![],
            aggregates: vec![],
        };
        assert!(report.validate().is_err());
    }
}

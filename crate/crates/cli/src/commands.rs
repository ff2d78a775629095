use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde_json::json;
use sylnet::audio::read_wav;
use sylnet::baseline_nets::{init_blstm, BlstmCountParams};
use sylnet::checkpoint::{load_checkpoint, save_checkpoint, AnyModel};
use sylnet::corpus::{load_manifest, make_split_plan, CorpusManifest, Utterance};
use sylnet::envelope::{
    apply_calibration, calibrate, default_grid, BandEnergyEnvelope, CalibrationFile, EnvelopeEstimator,
};
use sylnet::evaluation::{
    relative_error_pct, run_adaptation_experiment, trace_accumulation, AccumulationTrace, ExperimentOptions, Method,
};
use sylnet::features::{extract_features, model_input, CacheOutcome, FeatureCache, FeatureConfig};
use sylnet::model::Head;
use sylnet::objectives::LossKind;
use sylnet::seed::child_seed;
use sylnet::sylnet::{init_params, HeadType, SylNetParams};
use sylnet::synth::write_corpus;
use sylnet::training::{load_samples, split_train_val, train, EpochRecord, Sample, TrainConfig, TrainLog};
use walkdir::WalkDir;

use crate::config::{RunConfig, SNAPSHOT_NAME};
use crate::exit::UsageError;

pub const CHECKPOINT_NAME: &str = "model.safetensors";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ModelKind {
    Sylnet,
    Blstm,
}

/// Something that turns audio into a count: a neural checkpoint or an
/// envelope calibration.
pub enum Counter {
    Neural { model: AnyModel, features: FeatureConfig },
    Envelope(CalibrationFile),
}

/// One counted file: decoded count and the unrounded estimate behind it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub count: u32,
    pub raw: f64,
}

impl Counter {
    pub fn load(checkpoint: Option<&Path>, calibration: Option<&Path>) -> Result<Self> {
        match (checkpoint, calibration) {
            (Some(p), None) => {
                let (model, features) =
                    load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
                Ok(Counter::Neural { model, features })
            }
            (None, Some(p)) => Ok(Counter::Envelope(
                CalibrationFile::load(p).with_context(|| format!("loading calibration {}", p.display()))?,
            )),
            _ => Err(UsageError("give exactly one of --checkpoint or --calibration".into()).into()),
        }
    }

    /// Picks the loader from the file extension: `.toml` is a calibration.
    fn load_any(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "toml") {
            Self::load(None, Some(path))
        } else {
            Self::load(Some(path), None)
        }
    }

    pub fn estimate(&self, audio: &Path) -> Result<Estimate> {
        let wave = read_wav(audio)?;
        match self {
            Counter::Neural { model, features } => {
                let input = model_input(&extract_features(&wave, features)?, features);
                let trace = model.forward(&input)?;
                let out = trace.final_estimate();
                let raw = match model.head() {
                    Head::Scalar => out[0],
                    Head::Ordinal { .. } => out.iter().sum(),
                };
                let count = model.head().decode(out).round() as u32;
                Ok(Estimate { count, raw })
            }
            Counter::Envelope(file) => {
                let estimator = BandEnergyEnvelope {
                    config: file.envelope.clone(),
                };
                let cal = file.calibration();
                let raw = apply_calibration(estimator.envelope(&wave, "")?.peaks(cal.theta), &cal);
                Ok(Estimate {
                    count: raw.max(0.0).round() as u32,
                    raw,
                })
            }
        }
    }
}

fn loss_for(head: Head) -> LossKind {
    match head {
        Head::Scalar => LossKind::L1Relative,
        Head::Ordinal { .. } => LossKind::Ordinal,
    }
}

fn with_loss(config: &TrainConfig, head: Head) -> TrainConfig {
    TrainConfig {
        loss: loss_for(head),
        ..config.clone()
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn open_cache(dir: Option<&Path>, features: &FeatureConfig) -> Result<Option<FeatureCache>> {
    dir.map(|d| FeatureCache::new(d, features).map_err(Into::into)).transpose()
}

fn samples_for(manifest: &CorpusManifest, features: &FeatureConfig, cache: Option<&Path>) -> Result<Vec<Sample>> {
    let cache = open_cache(cache, features)?;
    let utts: Vec<&Utterance> = manifest.utterances.iter().collect();
    Ok(load_samples(&utts, features, cache.as_ref())?)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT_NAME))?;
    let manifest = write_corpus(out, &cfg.synth, child_seed(cfg.seed, "synth"))?;
    log::info!(
        "wrote {} utterances ({:.1} s) to {}",
        manifest.utterances.len(),
        manifest.total_duration_s(),
        out.display()
    );
    Ok(())
}

pub fn extract(cfg: &RunConfig, manifest_path: &Path, cache_dir: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    create_dir(cache_dir)?;
    cfg.write_snapshot(&cache_dir.join(SNAPSHOT_NAME))?;
    let cache = FeatureCache::new(cache_dir, &cfg.features)?;
    let outcomes = manifest
        .utterances
        .par_iter()
        .map(|u| Ok(cache.get_with_outcome(u)?.1))
        .collect::<sylnet::Result<Vec<_>>>()?;
    let n = |o: CacheOutcome| outcomes.iter().filter(|&&x| x == o).count();
    println!(
        "{} utterances: {} cached, {} computed, {} repaired",
        outcomes.len(),
        n(CacheOutcome::Hit),
        n(CacheOutcome::Miss),
        n(CacheOutcome::Repaired)
    );
    Ok(())
}

fn write_train_outputs(out: &Path, log: &TrainLog, extra: serde_json::Value) -> Result<()> {
    write_jsonl(&out.join("train_log.jsonl"), &log.epochs)?;
    let timing: Vec<_> = log
        .epochs
        .iter()
        .zip(&log.wall_clock_s)
        .map(|(e, s)| json!({"epoch": e.epoch, "seconds": s}))
        .collect();
    write_jsonl(&out.join("timing.jsonl"), &timing)?;
    let mut summary = json!({
        "epochs_run": log.epochs.len(),
        "best_epoch": log.best_epoch,
        "best_val_error": log.best_val_error,
        "stop": log.stop,
    });
    if let (Some(s), serde_json::Value::Object(e)) = (summary.as_object_mut(), extra) {
        s.extend(e);
    }
    write_json(&out.join("summary.json"), &summary)
}

pub fn train_model(cfg: &RunConfig, manifest_path: &Path, kind: ModelKind, out: &Path, cache: Option<&Path>) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    create_dir(out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT_NAME))?;
    let samples = samples_for(&manifest, &cfg.features, cache)?;
    let (train_set, val_set) = split_train_val(samples, cfg.train.val_fraction, child_seed(cfg.seed, "val-split"));
    let init_seed = child_seed(cfg.seed, "init");
    let model: AnyModel = match kind {
        ModelKind::Sylnet => {
            let mut c = cfg.sylnet.clone();
            if c.head == HeadType::Ordinal && c.rank == 0 {
                c.rank = manifest.max_count() as usize + 1;
            }
            init_params(&c, init_seed)?.into()
        }
        ModelKind::Blstm => init_blstm(&cfg.blstm, init_seed)?.into(),
    };
    let tc = with_loss(&cfg.train, model.head());
    let ckpt = out.join(CHECKPOINT_NAME);
    let features = cfg.features.clone();
    let save_best = |m: &AnyModel, r: &EpochRecord| {
        log::info!("epoch {}: new best stopping-set error {:.4}", r.epoch, r.val_error);
        save_checkpoint(&ckpt, m, &features)
    };
    // the hook saves every improvement, so an interrupted run keeps its best epoch
    let (best, log) = match model {
        AnyModel::Sylnet(p) => {
            let mut hook = |m: &SylNetParams, r: &EpochRecord| save_best(&AnyModel::Sylnet(m.clone()), r);
            let (m, log) = train(p, &train_set, &val_set, &tc, Some(&mut hook))?;
            (AnyModel::Sylnet(m), log)
        }
        AnyModel::BlstmCount(p) => {
            let mut hook = |m: &BlstmCountParams, r: &EpochRecord| save_best(&AnyModel::BlstmCount(m.clone()), r);
            let (m, log) = train(p, &train_set, &val_set, &tc, Some(&mut hook))?;
            (AnyModel::BlstmCount(m), log)
        }
    };
    save_checkpoint(&ckpt, &best, &cfg.features)?;
    write_train_outputs(
        out,
        &log,
        json!({"n_train": train_set.len(), "n_val": val_set.len(), "model": best.config()}),
    )?;
    println!(
        "{}: best epoch {} stopping-set error {:.4} ({:?})",
        ckpt.display(),
        log.best_epoch,
        log.best_val_error,
        log.stop
    );
    Ok(())
}

pub fn adapt_model(cfg: &RunConfig, checkpoint: &Path, manifest_path: &Path, out: &Path, cache: Option<&Path>) -> Result<()> {
    let (model, features) = load_checkpoint(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    create_dir(out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT_NAME))?;
    let samples = samples_for(&manifest, &features, cache)?;
    let (adapted, log) = model.adapt(&samples, &with_loss(&cfg.adapt, model.head()))?;
    let ckpt = out.join(CHECKPOINT_NAME);
    save_checkpoint(&ckpt, &adapted, &features)?;
    write_train_outputs(out, &log, json!({"n_adapt": samples.len(), "source": checkpoint}))?;
    println!(
        "{}: best epoch {} stopping-set error {:.4}",
        ckpt.display(),
        log.best_epoch,
        log.best_val_error
    );
    Ok(())
}

/// Expands directories recursively into their `.wav` files, sorted.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if inputs.is_empty() {
        return Err(UsageError("no audio inputs given".into()).into());
    }
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = WalkDir::new(input)
                .into_iter()
                .filter_map(|e| e.ok())
                .filter(|e| e.file_type().is_file())
                .map(|e| e.into_path())
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

/// Prints `path<TAB>count<TAB>raw` per file; failures go to stderr and make
/// the command fail after every file has been tried.
pub fn count(counter: &Counter, inputs: &[PathBuf]) -> Result<()> {
    let files = expand_inputs(inputs)?;
    let results: Vec<Result<Estimate>> = files.par_iter().map(|f| counter.estimate(f)).collect();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut failed = 0;
    for (f, r) in files.iter().zip(results) {
        match r {
            Ok(e) => writeln!(out, "{}\t{}\t{:.6}", f.display(), e.count, e.raw)?,
            Err(e) => {
                failed += 1;
                eprintln!("{}\terror: {e:#}", f.display());
            }
        }
    }
    out.flush()?;
    if failed > 0 {
        bail!("{failed} of {} inputs could not be counted", files.len());
    }
    Ok(())
}

pub fn calibrate_envelope(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    let snapshot = out.with_extension("resolved.toml");
    cfg.write_snapshot(&snapshot)?;
    let estimator = BandEnergyEnvelope {
        config: cfg.envelope.clone(),
    };
    let envs = manifest
        .utterances
        .par_iter()
        .map(|u| estimator.envelope(&read_wav(&u.audio_path)?, &u.id))
        .collect::<sylnet::Result<Vec<_>>>()?;
    let counts: Vec<u32> = manifest.utterances.iter().map(|u| u.syllable_count).collect();
    let fit = calibrate(&envs, &counts, &default_grid())?;
    CalibrationFile::new(&fit.calibration, &estimator).save(out)?;
    let c = fit.calibration;
    println!(
        "{}: theta {} alpha {:.6} beta {:.6} training error {:.4}",
        out.display(),
        c.theta,
        c.alpha,
        c.beta,
        fit.error
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, counter: &Counter, manifest_path: &Path, out: &Path, traces: bool) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    create_dir(out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT_NAME))?;
    let estimates = manifest
        .utterances
        .par_iter()
        .map(|u| counter.estimate(&u.audio_path).with_context(|| format!("utterance {}", u.id)))
        .collect::<Result<Vec<_>>>()?;
    let mut csv = String::from("id,target,predicted,raw\n");
    for (u, e) in manifest.utterances.iter().zip(&estimates) {
        csv += &format!("{},{},{},{}\n", u.id, u.syllable_count, e.count, e.raw);
    }
    fs::write(out.join("predictions.csv"), csv)?;
    let preds: Vec<f64> = estimates.iter().map(|e| e.count as f64).collect();
    let targets: Vec<u32> = manifest.utterances.iter().map(|u| u.syllable_count).collect();
    let err = relative_error_pct(&preds, &targets)?;
    write_json(
        &out.join("metrics.json"),
        &json!({"corpus": manifest.name, "n": preds.len(), "relative_error_pct": err}),
    )?;
    if traces {
        let Counter::Neural { model, features } = counter else {
            return Err(UsageError("--traces needs a neural checkpoint".into()).into());
        };
        let dir = out.join("traces");
        create_dir(&dir)?;
        manifest.utterances.par_iter().try_for_each(|u| -> Result<()> {
            let input = model_input(&extract_features(&read_wav(&u.audio_path)?, features)?, features);
            let trace = AccumulationTrace {
                utterance_id: u.id.clone(),
                reference_count: Some(u.syllable_count),
                hop_ms: features.hop_ms,
                decoded: trace_accumulation(model, &input)?,
            };
            write_json(&dir.join(format!("{}.json", u.id)), &trace)
        })?;
    }
    println!("{}: relative error {err:.2}% over {} utterances", manifest.name, preds.len());
    Ok(())
}

/// Parses `name=path` method specs for the experiment command.
pub fn parse_method_spec(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(UsageError(format!("method {spec:?} is not name=path")).into()),
    }
}

pub fn experiment(cfg: &RunConfig, manifest_path: &Path, specs: &[String], out: &Path, cache: Option<&Path>) -> Result<()> {
    if specs.is_empty() {
        return Err(UsageError("give at least one --method name=path".into()).into());
    }
    let manifest = load_manifest(manifest_path)?;
    let mut methods = Vec::new();
    for spec in specs {
        let (name, path) = parse_method_spec(spec)?;
        if methods.iter().any(|m: &Method| m.name() == name) {
            return Err(UsageError(format!("method name {name:?} given twice")).into());
        }
        methods.push(match Counter::load_any(&path)? {
            Counter::Neural { model, features } => Method::Neural {
                name,
                adapt: with_loss(&cfg.adapt, model.head()),
                model,
                features,
            },
            Counter::Envelope(file) => Method::Envelope {
                name,
                source: file.calibration(),
                estimator: BandEnergyEnvelope { config: file.envelope },
                grid: default_grid(),
            },
        });
    }
    create_dir(out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT_NAME))?;
    let plan = make_split_plan(&manifest, &cfg.split, child_seed(cfg.seed, "split"))?;
    plan.save(&out.join("split_plan.json"))?;
    let started = Instant::now();
    let options = ExperimentOptions {
        cache_dir: cache.map(Path::to_path_buf),
    };
    let report = run_adaptation_experiment(&methods, &manifest, &plan, &options)?;
    report.save(&out.join("report.json"))?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    for c in report.cells.iter().filter(|c| c.failure.is_some()) {
        log::warn!(
            "{} {} fold {} failed: {}",
            c.method,
            c.size_label,
            c.fold,
            c.failure.as_deref().unwrap_or_default()
        );
    }
    for a in &report.aggregates {
        println!(
            "{}\t{}\t{:.2} ± {:.2}% ({} folds)",
            a.method, a.size_label, a.mean_pct, a.std_pct, a.n_folds
        );
    }
    log::info!("experiment finished in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

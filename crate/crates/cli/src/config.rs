//! Layered run configuration: built-in defaults, then each `--config` file in
//! order, then `--set key=value` overrides. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sylnet::baseline_nets::BlstmCountConfig;
use sylnet::corpus::SplitConfig;
use sylnet::envelope::EnvelopeConfig;
use sylnet::features::FeatureConfig;
use sylnet::seed::child_seed;
use sylnet::sylnet::SylNetConfig;
use sylnet::synth::SynthConfig;
use sylnet::training::TrainConfig;
use toml::{Table, Value};

use crate::exit::UsageError;

pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream in the run.
    pub seed: u64,
    pub features: FeatureConfig,
    pub sylnet: SylNetConfig,
    pub blstm: BlstmCountConfig,
    pub train: TrainConfig,
    pub adapt: TrainConfig,
    pub envelope: EnvelopeConfig,
    pub split: SplitConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            features: FeatureConfig::default(),
            sylnet: SylNetConfig::default(),
            blstm: BlstmCountConfig::default(),
            train: TrainConfig::default(),
            adapt: TrainConfig::default(),
            envelope: EnvelopeConfig::default(),
            split: SplitConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Fills in values derived from other keys so that the snapshot is
    /// self-contained: model input widths follow the feature config, model
    /// dropout follows the trainer, and trainer seeds derive from `seed`.
    fn derive(mut self) -> Self {
        self.sylnet.input_dim = self.features.n_mels;
        self.blstm.input_dim = self.features.n_mels;
        self.sylnet.dropout_rate = self.train.dropout_rate;
        self.blstm.dropout_rate = self.train.dropout_rate;
        // TOML integers are signed 64-bit
        self.train.seed = child_seed(self.seed, "train") >> 1;
        self.adapt.seed = child_seed(self.seed, "adapt") >> 1;
        self
    }

    pub fn validate(&self) -> sylnet::Result<()> {
        self.features.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.envelope.validate()?;
        self.synth.validate()?;
        self.blstm.validate()
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).context("serializing resolved config")?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so that `--set sylnet.head=scalar` works unquoted.
fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override {spec:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(UsageError(format!("override key {key:?} is malformed")).into());
    }
    let (last, parents) = path.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| UsageError(format!("override {key:?}: {p:?} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Resolves defaults + files + overrides + seed into a validated config.
pub fn resolve(files: &[impl AsRef<Path>], overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut table = Table::try_from(RunConfig::default()).context("serializing defaults")?;
    for f in files {
        let f = f.as_ref();
        let text = fs::read_to_string(f).with_context(|| format!("reading config {}", f.display()))?;
        let layer: Table = toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", f.display())))?;
        merge(&mut table, layer);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(s) = seed {
        let s = i64::try_from(s).map_err(|_| UsageError(format!("seed {s} exceeds {}", i64::MAX)))?;
        table.insert("seed".into(), Value::Integer(s));
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| UsageError(format!("configuration: {e}")))?;
    let config = config.derive();
    config.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    const NONE: [&str; 0] = [];

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = resolve(
            &NONE,
            &["train.lr=0.01".into(), "sylnet.head=scalar".into(), "synth.snr_db=6".into()],
            Some(9),
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.sylnet.head, sylnet::sylnet::HeadType::Scalar);
        assert_eq!(c.synth.snr_db, Some(6.0));
        assert_eq!(c.seed, 9);
        let e = resolve(&NONE, &["train.learning_rate=1".into()], None).unwrap_err();
        assert!(e.downcast_ref::<UsageError>().is_some());
        assert!(e.to_string().contains("learning_rate"), "{e}");
        assert!(resolve(&NONE, &["nonsense".into()], None).is_err());
    }

    #[test]
    fn files_layer_in_order_and_snapshot_round_trips() {
        let d = tempfile::tempdir().unwrap();
        let a = d.path().join("a.toml");
        let b = d.path().join("b.toml");
        fs::write(&a, "[train]\nlr = 0.5\nbatch_size = 4\n").unwrap();
        fs::write(&b, "[train]\nlr = 0.25\n[features]\nn_mels = 20\n").unwrap();
        let c = resolve(&[&a, &b], &[], Some(3)).unwrap();
        assert_eq!((c.train.lr, c.train.batch_size), (0.25, 4));
        assert_eq!(c.sylnet.input_dim, 20);
        let snap = d.path().join(SNAPSHOT_NAME);
        c.write_snapshot(&snap).unwrap();
        assert_eq!(resolve(&[&snap], &[], None).unwrap(), c);
    }
}

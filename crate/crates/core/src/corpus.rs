//! Corpus manifests and speaker-disjoint test/adaptation split plans.
//!
//! A manifest is a UTF-8 file with one JSON object per line:
//!
//! ```text
//! {"id": "utt001", "audio_path": "wav/utt001.wav", "syllable_count": 7, "speaker_id": "spk3"}
//! ```
//!
//! Relative audio paths are resolved against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::wav_duration;
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub audio_path: PathBuf,
    pub syllable_count: u32,
    pub speaker_id: String,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub name: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    audio_path: String,
    syllable_count: i64,
    speaker_id: String,
}

const REQUIRED: [&str; 4] = ["id", "audio_path", "syllable_count", "speaker_id"];

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Ingestion {
            line: line_no,
            msg: format!("not a JSON record: {e}"),
        })?;
        let label = value
            .get("id")
            .and_then(|v| v.as_str())
            .map(|s| format!("record {s:?}"))
            .unwrap_or_else(|| "record".into());
        if let Some(missing) = REQUIRED.iter().find(|k| value.get(**k).is_none()) {
            return Err(Error::Ingestion {
                line: line_no,
                msg: format!("{label} is missing field {missing:?}"),
            });
        }
        let rec: Record = serde_json::from_value(value).map_err(|e| Error::Ingestion {
            line: line_no,
            msg: format!("{label}: {e}"),
        })?;
        records.push((line_no, rec));
    }

    let zero: Vec<String> = records
        .iter()
        .filter(|(_, r)| r.syllable_count < 1)
        .map(|(_, r)| r.id.clone())
        .collect();
    if !zero.is_empty() {
        return Err(Error::ZeroSyllables(zero));
    }
    let mut seen = HashSet::new();
    let mut utterances = Vec::with_capacity(records.len());
    for (line, r) in records {
        if !seen.insert(r.id.clone()) {
            return Err(Error::DuplicateId(r.id));
        }
        if r.speaker_id.is_empty() {
            return Err(Error::Ingestion {
                line,
                msg: format!("record {:?} has an empty speaker_id", r.id),
            });
        }
        let audio_path = base.join(&r.audio_path);
        let duration_s = wav_duration(&audio_path)?;
        if duration_s <= 0.0 {
            return Err(Error::Audio {
                path: audio_path,
                msg: "empty audio".into(),
            });
        }
        utterances.push(Utterance {
            id: r.id,
            audio_path,
            syllable_count: r.syllable_count as u32,
            speaker_id: r.speaker_id,
            duration_s,
        });
    }
    Ok(CorpusManifest {
        name: corpus_name(path),
        utterances,
    })
}

/// The manifest's file stem, or its directory's name for a generic
/// `manifest.jsonl`.
fn corpus_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem != "manifest" {
        return stem;
    }
    path.parent()
        .and_then(|d| d.canonicalize().ok())
        .and_then(|d| d.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or(stem)
}

/// Writes a manifest; audio paths under the manifest directory are stored relative to it.
pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for u in &manifest.utterances {
        let rel = u.audio_path.strip_prefix(base).unwrap_or(&u.audio_path);
        let rec = Record {
            id: u.id.clone(),
            audio_path: rel.to_string_lossy().into_owned(),
            syllable_count: u.syllable_count as i64,
            speaker_id: u.speaker_id.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

impl CorpusManifest {
    pub fn get(&self, id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.utterances.iter().map(|u| u.speaker_id.as_str()).collect()
    }

    pub fn max_count(&self) -> u32 {
        self.utterances.iter().map(|u| u.syllable_count).max().unwrap_or(0)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.utterances.iter().map(|u| u.duration_s).sum()
    }
}

/// Relative tolerance on the total duration of an adaptation set.
pub const SIZE_TOLERANCE: f64 = 0.10;

/// 8 geometrically spaced sizes from 30 s to 45 min.
pub fn default_sizes() -> Vec<f64> {
    let (lo, hi) = (30.0f64, 2700.0f64);
    (0..8).map(|k| lo * (hi / lo).powf(k as f64 / 7.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    /// Nominal adaptation set sizes in seconds.
    pub sizes_s: Vec<f64>,
    pub folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.5,
            sizes_s: default_sizes(),
            folds: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSet {
    pub size_label: String,
    pub size_s: f64,
    pub fold: usize,
    pub duration_s: f64,
    pub ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub test_ids: Vec<String>,
    pub adaptation_sets: Vec<AdaptationSet>,
}

pub fn size_label(size_s: f64) -> String {
    format!("{}s", size_s.round() as u64)
}

/// Assigns whole speakers to the test side until it holds `test_fraction` of
/// the utterances, then draws every (size, fold) adaptation set independently
/// from the remaining speakers' utterances.
pub fn make_split_plan(manifest: &CorpusManifest, config: &SplitConfig, seed: u64) -> Result<SplitPlan> {
    if !(0.0..1.0).contains(&config.test_fraction) || config.folds == 0 {
        return Err(Error::Split("test_fraction must be in [0, 1) and folds >= 1".into()));
    }
    let mut by_speaker: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in &manifest.utterances {
        by_speaker.entry(&u.speaker_id).or_default().push(u);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Split(format!(
            "corpus {:?} has {} speaker(s); speaker-disjoint splits need at least 2",
            manifest.name,
            by_speaker.len()
        )));
    }
    let mut speakers: Vec<&str> = by_speaker.keys().copied().collect();
    speakers.shuffle(&mut rng_for(seed, "split/speakers"));

    let wanted = config.test_fraction * manifest.utterances.len() as f64;
    let mut test: Vec<&Utterance> = Vec::new();
    let mut split_at = 0;
    for (i, s) in speakers.iter().enumerate() {
        if i == speakers.len() - 1 || (i > 0 && test.len() as f64 >= wanted) {
            break;
        }
        test.extend(&by_speaker[s]);
        split_at = i + 1;
    }
    let mut pool: Vec<&Utterance> = speakers[split_at..].iter().flat_map(|s| by_speaker[s].iter().copied()).collect();
    pool.sort_by(|a, b| a.id.cmp(&b.id));
    let pool_total: f64 = pool.iter().map(|u| u.duration_s).sum();

    let largest = config.sizes_s.iter().copied().fold(0.0, f64::max);
    if largest * (1.0 - SIZE_TOLERANCE) > pool_total {
        return Err(Error::Split(format!(
            "requested adaptation size {largest:.1} s but the non-test pool holds {pool_total:.1} s; \
             the largest achievable size is {:.1} s",
            pool_total / (1.0 - SIZE_TOLERANCE)
        )));
    }

    let mut adaptation_sets = Vec::new();
    for (si, &size) in config.sizes_s.iter().enumerate() {
        for fold in 0..config.folds {
            let mut rng = rng_for(seed, &format!("split/size{si}/fold{fold}"));
            let (lo, hi) = (size * (1.0 - SIZE_TOLERANCE), size * (1.0 + SIZE_TOLERANCE));
            let mut chosen = None;
            for _ in 0..500 {
                let mut order = pool.clone();
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let mut ids = Vec::new();
                for u in order {
                    if total >= size {
                        break;
                    }
                    if total + u.duration_s <= hi {
                        total += u.duration_s;
                        ids.push(u.id.clone());
                    }
                }
                if total >= lo {
                    chosen = Some((ids, total));
                    break;
                }
            }
            let (mut ids, total) = chosen.ok_or_else(|| {
                Error::Split(format!(
                    "could not draw a {size:.1} s adaptation set within ±{:.0}% from utterances of these durations",
                    SIZE_TOLERANCE * 100.0
                ))
            })?;
            ids.sort();
            adaptation_sets.push(AdaptationSet {
                size_label: size_label(size),
                size_s: size,
                fold,
                duration_s: total,
                ids,
            });
        }
    }
    let mut test_ids: Vec<String> = test.iter().map(|u| u.id.clone()).collect();
    test_ids.sort();
    Ok(SplitPlan {
        seed,
        test_ids,
        adaptation_sets,
    })
}

impl SplitPlan {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn sizes(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for s in &self.adaptation_sets {
            if !out.contains(&s.size_s) {
                out.push(s.size_s);
            }
        }
        out
    }

    pub fn folds(&self) -> usize {
        self.adaptation_sets.iter().map(|s| s.fold + 1).max().unwrap_or(0)
    }

    pub fn set(&self, size_s: f64, fold: usize) -> Option<&AdaptationSet> {
        self.adaptation_sets.iter().find(|s| s.size_s == size_s && s.fold == fold)
    }

    /// Checks every plan invariant against the manifest it was drawn from.
    pub fn validate(&self, manifest: &CorpusManifest) -> Result<()> {
        let speaker_of = |id: &str| {
            manifest
                .get(id)
                .map(|u| u.speaker_id.as_str())
                .ok_or_else(|| Error::Split(format!("id {id:?} not in manifest {:?}", manifest.name)))
        };
        let test: HashSet<&str> = self.test_ids.iter().map(String::as_str).collect();
        let test_speakers = self.test_ids.iter().map(|i| speaker_of(i)).collect::<Result<HashSet<_>>>()?;
        for set in &self.adaptation_sets {
            let dur: f64 = set
                .ids
                .iter()
                .map(|i| manifest.get(i).map(|u| u.duration_s).unwrap_or(0.0))
                .sum();
            if (dur - set.size_s).abs() > SIZE_TOLERANCE * set.size_s + 1e-9 {
                return Err(Error::Split(format!(
                    "set {} fold {} lasts {dur:.2} s",
                    set.size_label, set.fold
                )));
            }
            for id in &set.ids {
                if test.contains(id.as_str()) {
                    return Err(Error::Split(format!("{id:?} is in both test and adaptation data")));
                }
                if test_speakers.contains(speaker_of(id)?) {
                    return Err(Error::Split(format!("speaker of {id:?} also appears in the test set")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{write_wav, Waveform};

    fn write_corpus(dir: &Path, lines: &[&str]) -> PathBuf {
        write_wav(&dir.join("a.wav"), &Waveform::new(vec![0.0; 8000], 16000)).unwrap();
        let p = dir.join("m.jsonl");
        fs::write(&p, lines.join("\n")).unwrap();
        p
    }

    #[test]
    fn loads_well_formed_manifest() {
        let d = tempfile::tempdir().unwrap();
        let p = write_corpus(
            d.path(),
            &[
                r#"{"id":"u1","audio_path":"a.wav","syllable_count":3,"speaker_id":"s1"}"#,
                r#"{"id":"u2","audio_path":"a.wav","syllable_count":1,"speaker_id":"s1"}"#,
                r#"{"id":"u3","audio_path":"a.wav","syllable_count":9,"speaker_id":"s2"}"#,
            ],
        );
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.utterances.len(), 3);
        assert_eq!(m.name, "m");
        assert!((m.utterances[0].duration_s - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_zero_count() {
        let d = tempfile::tempdir().unwrap();
        let p = write_corpus(
            d.path(),
            &[
                r#"{"id":"u1","audio_path":"a.wav","syllable_count":0,"speaker_id":"s1"}"#,
                r#"{"id":"u2","audio_path":"a.wav","syllable_count":2,"speaker_id":"s1"}"#,
            ],
        );
        match load_manifest(&p) {
            Err(Error::ZeroSyllables(ids)) => assert_eq!(ids, vec!["u1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_id() {
        let d = tempfile::tempdir().unwrap();
        let p = write_corpus(
            d.path(),
            &[
                r#"{"id":"u1","audio_path":"a.wav","syllable_count":1,"speaker_id":"s1"}"#,
                r#"{"id":"u1","audio_path":"a.wav","syllable_count":2,"speaker_id":"s1"}"#,
            ],
        );
        let e = load_manifest(&p).unwrap_err();
        assert!(e.to_string().contains("u1"), "{e}");
    }

    #[test]
    fn missing_field_names_record() {
        let d = tempfile::tempdir().unwrap();
        let p = write_corpus(d.path(), &[r#"{"id":"u7","audio_path":"a.wav","speaker_id":"s1"}"#]);
        let e = load_manifest(&p).unwrap_err().to_string();
        assert!(e.contains("u7") && e.contains("syllable_count"), "{e}");
    }

    #[test]
    fn unreadable_audio_names_path() {
        let d = tempfile::tempdir().unwrap();
        let p = write_corpus(
            d.path(),
            &[r#"{"id":"u1","audio_path":"missing.wav","syllable_count":1,"speaker_id":"s1"}"#],
        );
        let e = load_manifest(&p).unwrap_err().to_string();
        assert!(e.contains("missing.wav"), "{e}");
    }

    fn fake(n: usize, speakers: usize, dur: f64) -> CorpusManifest {
        CorpusManifest {
            name: "fake".into(),
            utterances: (0..n)
                .map(|i| Utterance {
                    id: format!("u{i:03}"),
                    audio_path: PathBuf::from("x.wav"),
                    syllable_count: 1 + (i % 7) as u32,
                    speaker_id: format!("s{}", i % speakers),
                    duration_s: dur + (i % 5) as f64 * 0.3,
                })
                .collect(),
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let m = fake(100, 4, 1.5);
        let cfg = SplitConfig {
            test_fraction: 0.5,
            sizes_s: vec![10.0, 30.0],
            folds: 5,
        };
        let a = make_split_plan(&m, &cfg, 3).unwrap();
        assert_eq!(a, make_split_plan(&m, &cfg, 3).unwrap());
        a.validate(&m).unwrap();
        assert_eq!(a.adaptation_sets.len(), 10);
        assert!(a.test_ids.len() >= 40 && a.test_ids.len() <= 75);
    }

    #[test]
    fn two_speakers_are_separated() {
        let m = fake(40, 2, 2.0);
        let cfg = SplitConfig {
            test_fraction: 0.5,
            sizes_s: vec![8.0],
            folds: 5,
        };
        let plan = make_split_plan(&m, &cfg, 1).unwrap();
        let test_spk: BTreeSet<&str> = plan.test_ids.iter().map(|i| m.get(i).unwrap().speaker_id.as_str()).collect();
        for s in &plan.adaptation_sets {
            for id in &s.ids {
                assert!(!test_spk.contains(m.get(id).unwrap().speaker_id.as_str()));
            }
        }
    }

    #[test]
    fn single_speaker_rejected() {
        let m = fake(10, 1, 2.0);
        assert!(make_split_plan(&m, &SplitConfig::default(), 0).is_err());
    }

    #[test]
    fn oversized_request_states_maximum() {
        let m = fake(20, 2, 1.0);
        let e = make_split_plan(
            &m,
            &SplitConfig {
                test_fraction: 0.5,
                sizes_s: vec![500.0],
                folds: 5,
            },
            0,
        )
        .unwrap_err()
        .to_string();
        assert!(e.contains("largest achievable"), "{e}");
    }

    #[test]
    fn default_sizes_span_30s_to_45min() {
        let s = default_sizes();
        assert_eq!(s.len(), 8);
        assert!((s[0] - 30.0).abs() < 1e-9 && (s[7] - 2700.0).abs() < 1e-9);
        let ratio = s[1] / s[0];
        assert!(s.windows(2).all(|w| (w[1] / w[0] - ratio).abs() < 1e-9));
    }

    #[test]
    fn plan_persists_bit_exactly() {
        let m = fake(60, 3, 1.3);
        let cfg = SplitConfig {
            test_fraction: 0.5,
            sizes_s: vec![12.5],
            folds: 3,
        };
        let plan = make_split_plan(&m, &cfg, 77).unwrap();
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("plan.json");
        plan.save(&p).unwrap();
        assert_eq!(SplitPlan::load(&p).unwrap(), plan);
    }
}

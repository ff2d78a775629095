//! Synthetic corpora of vowel-like harmonic bursts with exact syllable counts.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, Waveform};
use crate::corpus::{write_manifest, CorpusManifest, Utterance};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub name: String,
    pub n_utterances: usize,
    pub n_speakers: usize,
    /// Counts are drawn uniformly from `min_count..=max_count`.
    pub min_count: u32,
    pub max_count: u32,
    pub burst_ms: (f64, f64),
    pub gap_ms: (f64, f64),
    /// Silence before the first and after the last burst.
    pub edge_ms: (f64, f64),
    /// Multiplies every burst and gap duration; below 1 means faster speech.
    pub rate_scale: f64,
    pub snr_db: Option<f64>,
    pub sample_rate_hz: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            n_utterances: 200,
            n_speakers: 4,
            min_count: 1,
            max_count: 12,
            burst_ms: (80.0, 250.0),
            gap_ms: (30.0, 150.0),
            edge_ms: (50.0, 150.0),
            rate_scale: 1.0,
            snr_db: None,
            sample_rate_hz: 16000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(a, b): (f64, f64)| a > 0.0 && a <= b;
        if self.n_utterances == 0 || self.n_speakers < 1 {
            return Err(Error::Config("n_utterances and n_speakers must be >= 1".into()));
        }
        if self.min_count < 1 || self.min_count > self.max_count {
            return Err(Error::Config("need 1 <= min_count <= max_count".into()));
        }
        if !range_ok(self.burst_ms) || !range_ok(self.gap_ms) || !range_ok(self.edge_ms) {
            return Err(Error::Config("duration ranges must be positive and ordered".into()));
        }
        if !(self.rate_scale > 0.0) {
            return Err(Error::Config("rate_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Per-speaker voice: fundamental frequency and two formant centres.
#[derive(Clone, Copy, Debug)]
struct Voice {
    f0: f64,
    formants: [f64; 2],
    bandwidth: f64,
}

impl Voice {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            f0: rng.random_range(90.0..240.0),
            formants: [rng.random_range(450.0..850.0), rng.random_range(1000.0..2200.0)],
            bandwidth: rng.random_range(80.0..200.0),
        }
    }

    fn harmonic_gain(&self, f: f64) -> f64 {
        self.formants
            .iter()
            .map(|&c| (-0.5 * ((f - c) / self.bandwidth).powi(2)).exp())
            .sum::<f64>()
            + 0.05
    }
}

#[derive(Clone, Debug)]
pub struct SynthUtterance {
    pub id: String,
    pub speaker_id: String,
    pub syllable_count: u32,
    pub wave: Waveform,
}

fn burst(out: &mut [f64], start: usize, len: usize, voice: &Voice, f0: f64, amp: f64, sr: f64) {
    let nyquist = sr / 2.0;
    let harmonics: Vec<(f64, f64)> = (1..)
        .map(|k| k as f64 * f0)
        .take_while(|&f| f < nyquist.min(4000.0))
        .map(|f| (f, voice.harmonic_gain(f)))
        .collect();
    let norm: f64 = harmonics.iter().map(|(_, g)| g).sum();
    for i in 0..len {
        let t = i as f64 / sr;
        let shape = (PI * i as f64 / len as f64).sin().powi(2);
        let tone: f64 = harmonics.iter().map(|&(f, g)| g * (2.0 * PI * f * t).sin()).sum();
        out[start + i] += amp * shape * tone / norm;
    }
}

fn utterance(config: &SynthConfig, voice: &Voice, rng: &mut ChaCha8Rng) -> (u32, Waveform) {
    let sr = config.sample_rate_hz as f64;
    let ms = |v: f64| (v * sr / 1000.0).round() as usize;
    let draw = |rng: &mut ChaCha8Rng, (a, b): (f64, f64)| if a == b { a } else { rng.random_range(a..b) };
    let count = rng.random_range(config.min_count..=config.max_count);
    let mut segments = Vec::new();
    let mut pos = ms(draw(rng, config.edge_ms));
    for k in 0..count {
        if k > 0 {
            pos += ms(draw(rng, config.gap_ms) * config.rate_scale);
        }
        let len = ms(draw(rng, config.burst_ms) * config.rate_scale).max(2);
        let f0 = voice.f0 * rng.random_range(0.9..1.1);
        let amp = rng.random_range(0.35..0.8);
        segments.push((pos, len, f0, amp));
        pos += len;
    }
    let total = pos + ms(draw(rng, config.edge_ms));
    let mut samples = vec![0.0; total];
    for &(start, len, f0, amp) in &segments {
        burst(&mut samples, start, len, voice, f0, amp, sr);
    }
    if let Some(snr) = config.snr_db {
        let power = samples.iter().map(|x| x * x).sum::<f64>() / total as f64;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for s in &mut samples {
            *s += noise.sample(rng);
        }
    }
    (count, Waveform::new(samples, config.sample_rate_hz))
}

/// Generates the corpus in memory; identical for identical (config, seed).
pub fn generate(config: &SynthConfig, seed: u64) -> Result<Vec<SynthUtterance>> {
    config.validate()?;
    let voices: Vec<Voice> = (0..config.n_speakers)
        .map(|k| Voice::draw(&mut rng_for(seed, &format!("synth/{}/speaker{k}", config.name))))
        .collect();
    Ok((0..config.n_utterances)
        .map(|i| {
            let k = i % config.n_speakers;
            let mut rng = rng_for(seed, &format!("synth/{}/utt{i}", config.name));
            let (count, wave) = utterance(config, &voices[k], &mut rng);
            SynthUtterance {
                id: format!("{}_{i:04}", config.name),
                speaker_id: format!("{}_spk{k}", config.name),
                syllable_count: count,
                wave,
            }
        })
        .collect())
}

/// Writes `wav/<id>.wav` and `manifest.jsonl` under `dir`.
pub fn write_corpus(dir: &Path, config: &SynthConfig, seed: u64) -> Result<CorpusManifest> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut utterances = Vec::new();
    for u in generate(config, seed)? {
        let path = wav_dir.join(format!("{}.wav", u.id));
        write_wav(&path, &u.wave)?;
        utterances.push(Utterance {
            id: u.id,
            audio_path: path,
            syllable_count: u.syllable_count,
            speaker_id: u.speaker_id,
            duration_s: u.wave.duration_s(),
        });
    }
    let manifest = CorpusManifest {
        name: config.name.clone(),
        utterances,
    };
    write_manifest(&dir.join("manifest.jsonl"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{band_energy_envelope, EnvelopeConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_utterances: 12,
            n_speakers: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small(), 4).unwrap();
        let b = generate(&small(), 4).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x.wave == y.wave && x.syllable_count == y.syllable_count));
        let c = generate(&small(), 5).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.wave != y.wave));
    }

    #[test]
    fn count_histogram_matches_uniform() {
        let cfg = SynthConfig {
            n_utterances: 1200,
            min_count: 1,
            max_count: 8,
            ..SynthConfig::default()
        };
        // draw counts with the same streams without rendering audio
        let voices = Voice::draw(&mut rng_for(0, "v"));
        let mut hist = [0usize; 8];
        for i in 0..cfg.n_utterances {
            let mut rng = rng_for(9, &format!("synth/{}/utt{i}", cfg.name));
            let short = SynthConfig {
                burst_ms: (2.0, 2.0),
                gap_ms: (1.0, 1.0),
                edge_ms: (1.0, 1.0),
                ..cfg.clone()
            };
            let (c, _) = utterance(&short, &voices, &mut rng);
            hist[(c - 1) as usize] += 1;
        }
        let expected = cfg.n_utterances as f64 / 8.0;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        // 7 degrees of freedom, 0.999 quantile
        assert!(chi2 < 24.32, "chi2 {chi2}, {hist:?}");
    }

    #[test]
    fn bursts_are_separable_in_the_envelope() {
        let cfg = SynthConfig {
            gap_ms: (100.0, 150.0),
            ..small()
        };
        for u in generate(&cfg, 1).unwrap() {
            let e = band_energy_envelope(&u.wave, &EnvelopeConfig::default(), &u.id).unwrap();
            let n = crate::envelope::pick_peaks(&e.values, 0.05);
            assert!((n as i64 - u.syllable_count as i64).abs() <= 1, "{} vs {}", n, u.syllable_count);
        }
    }

    #[test]
    fn corpus_on_disk_loads_back() {
        let d = tempfile::tempdir().unwrap();
        let m = write_corpus(d.path(), &small(), 2).unwrap();
        let loaded = crate::corpus::load_manifest(&d.path().join("manifest.jsonl")).unwrap();
        assert_eq!(loaded.utterances.len(), m.utterances.len());
        for (a, b) in loaded.utterances.iter().zip(&m.utterances) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.syllable_count, b.syllable_count);
            assert!((a.duration_s - b.duration_s).abs() < 1e-12);
        }
        assert_eq!(loaded.speakers().len(), 3);
    }
}

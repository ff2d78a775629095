//! Log-Mel filterbank features and their on-disk cache.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::Axis;
use rustfft::{num_complex::Complex, Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{read_wav, Waveform};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub log_floor: f64,
    /// Per-utterance mean/variance normalization of model inputs.
    pub normalize: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16000,
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 24,
            fmin_hz: 50.0,
            fmax_hz: 8000.0,
            log_floor: 1e-10,
            normalize: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.window_ms > self.hop_ms
            && self.hop_ms > 0.0
            && self.n_mels >= 1
            && self.fmin_hz >= 0.0
            && self.fmin_hz < self.fmax_hz
            && self.fmax_hz <= self.sample_rate_hz as f64 / 2.0
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid feature configuration {self:?}")))
        }
    }

    pub fn window_samples(&self) -> usize {
        (self.window_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }

    /// `floor((samples − window) / hop) + 1`, or 0 when shorter than a window.
    pub fn frame_count(&self, samples: usize) -> usize {
        let win = self.window_samples();
        if samples < win {
            0
        } else {
            (samples - win) / self.hop_samples() + 1
        }
    }

    /// Short stable hash identifying the configuration in cache keys.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex16(&Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `T × D`
    pub values: Mat,
    pub frame_hop_ms: f64,
    pub utterance_id: String,
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the mel scale, `(n_fft/2 + 1) × n_mels`, unit peak height.
pub fn mel_filterbank(config: &FeatureConfig, n_fft: usize) -> Mat {
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(config.fmin_hz), hz_to_mel(config.fmax_hz));
    let edges: Vec<f64> = (0..config.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (config.n_mels + 1) as f64))
        .collect();
    let bin_hz = config.sample_rate_hz as f64 / n_fft as f64;
    Mat::from_shape_fn((bins, config.n_mels), |(b, m)| {
        let f = b as f64 * bin_hz;
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        if f > l && f <= c {
            (f - l) / (c - l)
        } else if f > c && f < r {
            (r - f) / (r - c)
        } else {
            0.0
        }
    })
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct MelExtractor {
    config: FeatureConfig,
    n_fft: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    filterbank: Mat,
}

impl MelExtractor {
    pub fn new(config: &FeatureConfig) -> Result<Self> {
        config.validate()?;
        let win = config.window_samples();
        let n_fft = win.next_power_of_two();
        let window = (0..win)
            .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (win - 1) as f64).cos())
            .collect();
        Ok(Self {
            config: config.clone(),
            n_fft,
            window,
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            filterbank: mel_filterbank(config, n_fft),
        })
    }

    pub fn extract(&self, audio: &Waveform, utterance_id: &str) -> Result<FeatureMatrix> {
        if audio.samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("{utterance_id}: non-finite audio samples")));
        }
        let audio = audio.at_rate(self.config.sample_rate_hz)?;
        let frames = self.config.frame_count(audio.samples.len());
        if frames == 0 {
            return Err(Error::InvalidInput(format!(
                "{utterance_id}: {} samples is shorter than one {} ms window",
                audio.samples.len(),
                self.config.window_ms
            )));
        }
        let hop = self.config.hop_samples();
        let bins = self.n_fft / 2 + 1;
        let mut power = Mat::zeros((frames, bins));
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        for t in 0..frames {
            let start = t * hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let s = if i < self.window.len() {
                    audio.samples[start + i] * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(s, 0.0);
            }
            self.fft.process(&mut buf);
            for (b, c) in buf[..bins].iter().enumerate() {
                power[[t, b]] = c.norm_sqr();
            }
        }
        let floor = self.config.log_floor;
        let values = power.dot(&self.filterbank).mapv_into(|e| (e + floor).ln());
        Ok(FeatureMatrix {
            values,
            frame_hop_ms: self.config.hop_ms,
            utterance_id: utterance_id.to_string(),
        })
    }
}

pub fn extract_features(audio: &Waveform, config: &FeatureConfig) -> Result<FeatureMatrix> {
    MelExtractor::new(config)?.extract(audio, "")
}

/// Per-band zero mean, unit variance over the utterance. Constant bands map to 0.
pub fn normalize(values: &Mat) -> Mat {
    let mean = values.mean_axis(Axis(0)).expect("at least one frame");
    let std = values.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
    (values - &mean) / &std
}

/// The matrix a model consumes: normalized when the configuration asks for it.
pub fn model_input(features: &FeatureMatrix, config: &FeatureConfig) -> Mat {
    if config.normalize {
        normalize(&features.values)
    } else {
        features.values.clone()
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_all(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const MAGIC: &str = "SYLFEAT1";

/// Outcome of a cache lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CacheOutcome {
    Hit,
    Miss,
    /// A stored entry failed verification and was recomputed.
    Repaired,
}

/// Feature cache keyed by (audio content hash, configuration hash).
///
/// Entry layout: one text header line
/// `SYLFEAT1 rows=<T> cols=<D> hop_ms=<hop> sha256=<payload hash>` followed by
/// `T·D` little-endian `f64` values in row-major order.
pub struct FeatureCache {
    dir: PathBuf,
    config: FeatureConfig,
    extractor: MelExtractor,
    computed: AtomicUsize,
    tmp_counter: AtomicUsize,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>, config: &FeatureConfig) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self {
            dir,
            config: config.clone(),
            extractor: MelExtractor::new(config)?,
            computed: AtomicUsize::new(0),
            tmp_counter: AtomicUsize::new(0),
        })
    }

    /// Number of feature extractions this cache has performed.
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::SeqCst)
    }

    pub fn entry_path(&self, audio_bytes: &[u8]) -> PathBuf {
        let content = hex16(&Sha256::digest(audio_bytes));
        self.dir.join(format!("{content}-{}.feat", self.config.fingerprint()))
    }

    pub fn get(&self, utterance: &Utterance) -> Result<FeatureMatrix> {
        self.get_with_outcome(utterance).map(|(m, _)| m)
    }

    pub fn get_with_outcome(&self, utterance: &Utterance) -> Result<(FeatureMatrix, CacheOutcome)> {
        let bytes = fs::read(&utterance.audio_path).map_err(|e| Error::Audio {
            path: utterance.audio_path.clone(),
            msg: e.to_string(),
        })?;
        let path = self.entry_path(&bytes);
        let mut outcome = CacheOutcome::Miss;
        if path.exists() {
            match read_entry(&path) {
                Ok((values, hop)) => {
                    return Ok((
                        FeatureMatrix {
                            values,
                            frame_hop_ms: hop,
                            utterance_id: utterance.id.clone(),
                        },
                        CacheOutcome::Hit,
                    ))
                }
                Err(e) => {
                    log::warn!("feature cache entry {path:?} is corrupt ({e}); recomputing");
                    outcome = CacheOutcome::Repaired;
                }
            }
        }
        let wave = read_wav(&utterance.audio_path)?;
        let fm = self.extractor.extract(&wave, &utterance.id)?;
        self.computed.fetch_add(1, Ordering::SeqCst);
        self.write_entry(&path, &fm)?;
        Ok((fm, outcome))
    }

    fn write_entry(&self, path: &Path, fm: &FeatureMatrix) -> Result<()> {
        let payload: Vec<u8> = fm.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        let header = format!(
            "{MAGIC} rows={} cols={} hop_ms={} sha256={}\n",
            fm.values.nrows(),
            fm.values.ncols(),
            fm.frame_hop_ms,
            hex_all(&Sha256::digest(&payload))
        );
        // unique temp name, then an atomic rename: concurrent writers of one key
        // each publish a complete entry and the last rename wins
        let tmp = path.with_extension(format!(
            "tmp.{}.{}",
            std::process::id(),
            self.tmp_counter.fetch_add(1, Ordering::SeqCst)
        ));
        let write = || -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(header.as_bytes())?;
            f.write_all(&payload)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::io(path, e))
    }
}

fn read_entry(path: &Path) -> std::result::Result<(Mat, f64), String> {
    let data = fs::read(path).map_err(|e| e.to_string())?;
    let nl = data.iter().position(|&b| b == b'\n').ok_or("missing header")?;
    let header = std::str::from_utf8(&data[..nl]).map_err(|e| e.to_string())?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some(MAGIC) {
        return Err("bad magic".into());
    }
    let mut rows = None;
    let mut cols = None;
    let mut hop = None;
    let mut hash = None;
    for f in fields {
        let (k, v) = f.split_once('=').ok_or("malformed header field")?;
        match k {
            "rows" => rows = v.parse::<usize>().ok(),
            "cols" => cols = v.parse::<usize>().ok(),
            "hop_ms" => hop = v.parse::<f64>().ok(),
            "sha256" => hash = Some(v.to_string()),
            _ => return Err(format!("unknown header field {k}")),
        }
    }
    let (rows, cols, hop, hash) = match (rows, cols, hop, hash) {
        (Some(r), Some(c), Some(h), Some(s)) => (r, c, h, s),
        _ => return Err("incomplete header".into()),
    };
    let payload = &data[nl + 1..];
    if payload.len() != rows * cols * 8 {
        return Err("payload length mismatch".into());
    }
    if hex_all(&Sha256::digest(payload)) != hash {
        return Err("payload hash mismatch".into());
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let m = Mat::from_shape_vec((rows, cols), values).map_err(|e| e.to_string())?;
    Ok((m, hop))
}

/// One-shot cached extraction into `cache_dir`.
pub fn cached_extract(utterance: &Utterance, config: &FeatureConfig, cache_dir: &Path) -> Result<FeatureMatrix> {
    FeatureCache::new(cache_dir, config)?.get(utterance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.random::<f64>() - 0.5).collect(), 16000)
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = extract_features(&noise(16000, 1), &FeatureConfig::default()).unwrap();
        assert_eq!(f.values.dim(), (98, 24));
    }

    #[test]
    fn frame_count_formula_for_random_lengths() {
        let cfg = FeatureConfig::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let ex = MelExtractor::new(&cfg).unwrap();
        for _ in 0..20 {
            let n = rng.random_range(400..6000);
            let f = ex.extract(&noise(n, n as u64), "x").unwrap();
            assert_eq!(f.values.nrows(), (n - 400) / 160 + 1);
        }
    }

    #[test]
    fn silence_is_log_floor() {
        let cfg = FeatureConfig::default();
        let f = extract_features(&Waveform::new(vec![0.0; 4000], 16000), &cfg).unwrap();
        let expected = cfg.log_floor.ln();
        assert!(f.values.iter().all(|&v| v == expected));
    }

    #[test]
    fn deterministic() {
        let cfg = FeatureConfig::default();
        let w = noise(5000, 3);
        assert_eq!(extract_features(&w, &cfg).unwrap(), extract_features(&w, &cfg).unwrap());
    }

    #[test]
    fn amplitude_scaling_shifts_log_energy() {
        let cfg = FeatureConfig {
            log_floor: 1e-30,
            ..FeatureConfig::default()
        };
        let w = noise(8000, 4);
        let c: f64 = 3.7;
        let scaled = Waveform::new(w.samples.iter().map(|s| s * c).collect(), 16000);
        let a = extract_features(&w, &cfg).unwrap().values;
        let b = extract_features(&scaled, &cfg).unwrap().values;
        let shift = 2.0 * c.ln();
        let worst = (&b - &a).iter().map(|d| (d - shift).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn too_short_and_non_finite_rejected() {
        let cfg = FeatureConfig::default();
        assert!(extract_features(&Waveform::new(vec![0.1; 399], 16000), &cfg).is_err());
        let mut w = noise(1000, 5);
        w.samples[10] = f64::NAN;
        assert!(extract_features(&w, &cfg).is_err());
    }

    #[test]
    fn every_filter_covers_some_bins() {
        let fb = mel_filterbank(&FeatureConfig::default(), 512);
        for m in 0..24 {
            assert!(fb.column(m).iter().any(|&v| v > 0.0), "band {m}");
        }
    }

    #[test]
    fn normalization_zero_mean_unit_variance() {
        let f = extract_features(&noise(8000, 6), &FeatureConfig::default()).unwrap();
        let n = normalize(&f.values);
        for col in n.columns() {
            assert!(col.mean().unwrap().abs() < 1e-10);
            assert!((col.std(0.0) - 1.0).abs() < 1e-8);
        }
        let flat = normalize(&Mat::from_elem((5, 3), -23.0));
        assert!(flat.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(FeatureConfig::default().validate().is_ok());
        let bad = FeatureConfig {
            hop_ms: 30.0,
            ..FeatureConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = FeatureConfig {
            fmax_hz: 9000.0,
            ..FeatureConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

//! Envelope-based counting: sonority envelope, threshold peak picking and
//! the (θ, α, β) calibration that maps peak counts to syllable counts.

use std::fs;
use std::path::Path;

use biquad::{Biquad, Coefficients, DirectForm2Transposed, ToHertz, Type, Q_BUTTERWORTH_F64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub values: Vec<f64>,
    pub hop_ms: f64,
    pub utterance_id: String,
}

impl Envelope {
    pub fn peaks(&self, theta: f64) -> u32 {
        pick_peaks(&self.values, theta)
    }
}

/// Anything that turns a waveform into a nonnegative envelope.
pub trait EnvelopeEstimator: Send + Sync {
    fn envelope(&self, audio: &Waveform, utterance_id: &str) -> Result<Envelope>;
    /// Stable hash of everything that influences the output.
    fn fingerprint(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvelopeConfig {
    pub sample_rate_hz: u32,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub smoothing_hz: f64,
    pub hop_ms: f64,
}

impl Default for EnvelopeConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16000,
            band_low_hz: 300.0,
            band_high_hz: 2500.0,
            smoothing_hz: 10.0,
            hop_ms: 10.0,
        }
    }
}

impl EnvelopeConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if !(0.0 < self.smoothing_hz && self.smoothing_hz < nyquist) {
            return Err(Error::Config(format!("smoothing_hz must be in (0, {nyquist})")));
        }
        if !(0.0 < self.band_low_hz && self.band_low_hz < self.band_high_hz && self.band_high_hz < nyquist) {
            return Err(Error::Config(format!(
                "need 0 < band_low_hz < band_high_hz < {nyquist}, got {} and {}",
                self.band_low_hz, self.band_high_hz
            )));
        }
        if self.hop_samples() == 0 {
            return Err(Error::Config("hop_ms is shorter than one sample".into()));
        }
        Ok(())
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop_ms * self.sample_rate_hz as f64 / 1000.0).round() as usize
    }
}

/// Band-limited energy envelope: 300–2500 Hz bandpass, full-wave
/// rectification, 10 Hz low-pass, one value per hop, max-normalized.
#[derive(Clone, Debug, Default)]
pub struct BandEnergyEnvelope {
    pub config: EnvelopeConfig,
}

fn filter(kind: Type<f64>, fs: f64, f0: f64) -> Result<DirectForm2Transposed<f64>> {
    let c = Coefficients::<f64>::from_params(kind, fs.hz(), f0.hz(), Q_BUTTERWORTH_F64)
        .map_err(|e| Error::Config(format!("filter at {f0} Hz: {e:?}")))?;
    Ok(DirectForm2Transposed::<f64>::new(c))
}

pub fn band_energy_envelope(audio: &Waveform, config: &EnvelopeConfig, utterance_id: &str) -> Result<Envelope> {
    config.validate()?;
    let audio = audio.at_rate(config.sample_rate_hz)?;
    let fs = config.sample_rate_hz as f64;
    // two second-order sections per edge
    let mut chain = vec![
        filter(Type::HighPass, fs, config.band_low_hz)?,
        filter(Type::HighPass, fs, config.band_low_hz)?,
        filter(Type::LowPass, fs, config.band_high_hz)?,
        filter(Type::LowPass, fs, config.band_high_hz)?,
    ];
    let mut smooth = [
        filter(Type::LowPass, fs, config.smoothing_hz)?,
        filter(Type::LowPass, fs, config.smoothing_hz)?,
    ];
    let hop = config.hop_samples();
    let mut values = Vec::with_capacity(audio.samples.len() / hop + 1);
    for (i, &x) in audio.samples.iter().enumerate() {
        let band = chain.iter_mut().fold(x, |acc, f| f.run(acc));
        let y = smooth.iter_mut().fold(band.abs(), |acc, f| f.run(acc));
        if i % hop == 0 {
            values.push(y.max(0.0));
        }
    }
    let peak = values.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        values.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Envelope {
        values,
        hop_ms: config.hop_ms,
        utterance_id: utterance_id.to_string(),
    })
}

impl EnvelopeEstimator for BandEnergyEnvelope {
    fn envelope(&self, audio: &Waveform, utterance_id: &str) -> Result<Envelope> {
        band_energy_envelope(audio, &self.config, utterance_id)
    }

    fn fingerprint(&self) -> String {
        let json = serde_json::to_string(&self.config).expect("config serializes");
        let digest = Sha256::digest(format!("band_energy:{json}").as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Counts interior local maxima whose rise above the preceding local minimum
/// is at least `theta`. Runs of equal values are treated as a single sample;
/// before the first interior minimum the reference is the first sample.
pub fn pick_peaks(values: &[f64], theta: f64) -> u32 {
    let mut runs: Vec<f64> = Vec::with_capacity(values.len());
    for &v in values {
        if runs.last() != Some(&v) {
            runs.push(v);
        }
    }
    let Some(&first) = runs.first() else {
        return 0;
    };
    let mut last_min = first;
    let mut count = 0;
    for w in runs.windows(3) {
        let (a, b, c) = (w[0], w[1], w[2]);
        if a < b && b > c {
            if b - last_min >= theta {
                count += 1;
            }
        } else if a > b && b < c {
            last_min = b;
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeCalibration {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn apply_calibration(n: u32, cal: &EnvelopeCalibration) -> f64 {
    cal.alpha * n as f64 + cal.beta
}

/// θ ∈ {0.00, 0.01, …, 1.00}.
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Ordinary least squares of `s` on `n`; constant `n` falls back to α = 0, β = mean(s).
pub fn least_squares(n: &[u32], s: &[u32]) -> (f64, f64) {
    let m = n.len() as f64;
    let n_mean = n.iter().map(|&v| v as f64).sum::<f64>() / m;
    let s_mean = s.iter().map(|&v| v as f64).sum::<f64>() / m;
    let var: f64 = n.iter().map(|&v| (v as f64 - n_mean).powi(2)).sum();
    if var == 0.0 {
        return (0.0, s_mean);
    }
    let cov: f64 = n
        .iter()
        .zip(s)
        .map(|(&a, &b)| (a as f64 - n_mean) * (b as f64 - s_mean))
        .sum();
    let alpha = cov / var;
    (alpha, s_mean - alpha * n_mean)
}

/// Mean relative L1 error of `α·n + β` against `s` (unclamped).
pub fn calibration_error(n: &[u32], s: &[u32], cal: &EnvelopeCalibration) -> f64 {
    n.iter()
        .zip(s)
        .map(|(&a, &b)| (apply_calibration(a, cal) - b as f64).abs() / b as f64)
        .sum::<f64>()
        / n.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibrationFit {
    pub calibration: EnvelopeCalibration,
    pub error: f64,
}

fn check_inputs(envelopes: &[Envelope], counts: &[u32], grid: &[f64]) -> Result<()> {
    if envelopes.len() != counts.len() {
        return Err(Error::InvalidInput(format!(
            "{} envelopes but {} counts",
            envelopes.len(),
            counts.len()
        )));
    }
    if envelopes.len() < 2 {
        return Err(Error::InvalidInput("calibration needs at least 2 utterances".into()));
    }
    if grid.is_empty() || grid.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
        return Err(Error::InvalidInput("θ grid must be non-empty, finite and nonnegative".into()));
    }
    if counts.contains(&0) {
        return Err(Error::InvalidInput("syllable counts must be >= 1".into()));
    }
    Ok(())
}

/// Deterministic argmin: lowest error, then smallest θ.
fn better(a: &CalibrationFit, b: &CalibrationFit) -> bool {
    a.error < b.error || (a.error == b.error && a.calibration.theta < b.calibration.theta)
}

/// Exhaustive search over `grid` with a least-squares (α, β) per θ.
pub fn calibrate(envelopes: &[Envelope], counts: &[u32], grid: &[f64]) -> Result<CalibrationFit> {
    check_inputs(envelopes, counts, grid)?;
    let fits: Vec<CalibrationFit> = grid
        .par_iter()
        .map(|&theta| {
            let n: Vec<u32> = envelopes.iter().map(|e| e.peaks(theta)).collect();
            let (alpha, beta) = least_squares(&n, counts);
            let calibration = EnvelopeCalibration { theta, alpha, beta };
            CalibrationFit {
                calibration,
                error: calibration_error(&n, counts, &calibration),
            }
        })
        .collect();
    let mut best = fits[0];
    for f in &fits[1..] {
        if better(f, &best) {
            best = *f;
        }
    }
    Ok(best)
}

/// Re-estimates (θ, α, β) on new data; the existing triplet competes as one
/// more candidate so the result is never worse than keeping it.
pub fn recalibrate(
    envelopes: &[Envelope],
    counts: &[u32],
    grid: &[f64],
    source: &EnvelopeCalibration,
) -> Result<CalibrationFit> {
    let searched = calibrate(envelopes, counts, grid)?;
    let n: Vec<u32> = envelopes.iter().map(|e| e.peaks(source.theta)).collect();
    let kept = CalibrationFit {
        calibration: *source,
        error: calibration_error(&n, counts, source),
    };
    Ok(if better(&kept, &searched) { kept } else { searched })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub envelope_fingerprint: String,
    pub envelope: EnvelopeConfig,
}

impl CalibrationFile {
    pub fn new(cal: &EnvelopeCalibration, estimator: &BandEnergyEnvelope) -> Self {
        Self {
            theta: cal.theta,
            alpha: cal.alpha,
            beta: cal.beta,
            envelope_fingerprint: estimator.fingerprint(),
            envelope: estimator.config.clone(),
        }
    }

    pub fn calibration(&self) -> EnvelopeCalibration {
        EnvelopeCalibration {
            theta: self.theta,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks that the stored fingerprint matches the stored envelope config.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: Self = toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let expected = BandEnergyEnvelope {
            config: file.envelope.clone(),
        }
        .fingerprint();
        if expected != file.envelope_fingerprint {
            return Err(Error::Checkpoint(format!(
                "{}: envelope fingerprint {} does not match its config ({expected})",
                path.display(),
                file.envelope_fingerprint
            )));
        }
        Ok(file)
    }
}

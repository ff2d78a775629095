//! Mono waveform I/O and sample-rate conversion.

use std::path::Path;

use rubato::{FftFixedIn, Resampler};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Returns this waveform at `rate`, resampling only when the rates differ.
    pub fn at_rate(&self, rate: u32) -> Result<Waveform> {
        if rate == self.sample_rate {
            return Ok(self.clone());
        }
        resample(self, rate)
    }
}

fn audio_err(path: &Path, msg: impl ToString) -> Error {
    Error::Audio {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

/// Reads a PCM or float WAV file; multichannel input is averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| audio_err(path, e))?
        }
    };
    let samples = interleaved
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(Waveform::new(samples, spec.sample_rate))
}

/// Duration from the WAV header alone.
pub fn wav_duration(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = reader.spec();
    Ok(reader.duration() as f64 / spec.sample_rate as f64)
}

/// Writes 16-bit mono PCM. Samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| audio_err(path, e))?;
    for &s in &wave.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(q).map_err(|e| audio_err(path, e))?;
    }
    w.finalize().map_err(|e| audio_err(path, e))
}

/// FFT-based synchronous resampling; output length is `round(n · to / from)`
/// with the resampler delay removed.
pub fn resample(wave: &Waveform, to: u32) -> Result<Waveform> {
    let from = wave.sample_rate;
    let err = |e: &dyn std::fmt::Display| Error::InvalidInput(format!("resampling {from} -> {to} Hz: {e}"));
    let mut r = FftFixedIn::<f64>::new(from as usize, to as usize, 1024, 2, 1).map_err(|e| err(&e))?;
    let n = wave.samples.len();
    let expected = (n as f64 * to as f64 / from as f64).round() as usize;
    let delay = r.output_delay();
    let mut out = Vec::with_capacity(expected + delay + 2048);
    let mut pos = 0;
    while pos + r.input_frames_next() <= n {
        let need = r.input_frames_next();
        let chunk = r.process(&[&wave.samples[pos..pos + need]], None).map_err(|e| err(&e))?;
        out.extend_from_slice(&chunk[0]);
        pos += need;
    }
    if pos < n {
        let chunk = r
            .process_partial(Some(&[&wave.samples[pos..]]), None)
            .map_err(|e| err(&e))?;
        out.extend_from_slice(&chunk[0]);
    }
    while out.len() < delay + expected {
        let chunk = r.process_partial::<&[f64]>(None, None).map_err(|e| err(&e))?;
        out.extend_from_slice(&chunk[0]);
    }
    Ok(Waveform::new(out[delay..delay + expected].to_vec(), to))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_round_trip_quantizes_to_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new((0..800).map(|i| (i as f64 * 0.01).sin() * 0.5).collect(), 16000);
        write_wav(&p, &w).unwrap();
        let r = read_wav(&p).unwrap();
        assert_eq!(r.sample_rate, 16000);
        assert_eq!(r.samples.len(), 800);
        assert!(r.samples.iter().zip(&w.samples).all(|(a, b)| (a - b).abs() < 1.0 / 32767.0));
        assert!((wav_duration(&p).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn unreadable_file_names_path() {
        let e = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/x.wav"));
    }

    #[test]
    fn resampling_preserves_a_tone() {
        let from = 8000u32;
        let f = 440.0;
        let w = Waveform::new(
            (0..8000)
                .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / from as f64).sin())
                .collect(),
            from,
        );
        let r = w.at_rate(16000).unwrap();
        assert_eq!(r.samples.len(), 16000);
        // away from the edges the output is the same tone at the new rate
        let max_err = (2000..14000)
            .map(|i| (r.samples[i] - (2.0 * std::f64::consts::PI * f * i as f64 / 16000.0).sin()).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.01, "{max_err}");
    }
}

//! WAV file I/O for mono clips.
//!
//! Files are written as 16-bit PCM. On load, int formats are scaled to
//! [-1, 1] and a clip whose rate differs from the requested one is
//! linearly resampled. Multi-channel input is rejected rather than
//! silently downmixed.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::dsp::AudioClip;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Linear resampling to a new rate. Endpoint samples are clamped.
pub fn resample<F: Scalar>(clip: &AudioClip<F>, target_rate_hz: u32) -> AudioClip<F> {
    if clip.sample_rate_hz == target_rate_hz || clip.is_empty() {
        return AudioClip::new(clip.samples.clone(), target_rate_hz);
    }
    let ratio = clip.sample_rate_hz as f64 / target_rate_hz as f64;
    let out_len = ((clip.len() as f64 / ratio).round() as usize).max(1);
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let k = (pos.floor() as usize).min(clip.len() - 1);
            let frac = F::from_f(pos - k as f64);
            let a = clip.samples[k];
            let b = clip.samples[(k + 1).min(clip.len() - 1)];
            a + (b - a) * frac
        })
        .collect();
    AudioClip::new(samples, target_rate_hz)
}

/// Load a mono WAV file, resampling to `target_rate_hz` if needed.
pub fn load_wav<F: Scalar>(path: &Path, target_rate_hz: u32) -> Result<AudioClip<F>> {
    let reader = WavReader::open(path).map_err(|e| Error::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Wav(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<F> = match spec.sample_format {
        SampleFormat::Int => {
            let denom = ((1i64 << (spec.bits_per_sample - 1)) as f64).max(1.0);
            reader
                .into_samples::<i32>()
                .map(|s| {
                    s.map(|v| F::from_f(v as f64 / denom))
                        .map_err(|e| Error::Wav(e.to_string()))
                })
                .collect::<Result<_>>()?
        }
        SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| {
                s.map(|v| F::from_f(v as f64))
                    .map_err(|e| Error::Wav(e.to_string()))
            })
            .collect::<Result<_>>()?,
    };
    let clip = AudioClip::new(samples, spec.sample_rate);
    Ok(resample(&clip, target_rate_hz))
}

/// Write a clip as 16-bit mono PCM; samples outside [-1, 1] are clipped.
pub fn save_wav<F: Scalar>(path: &Path, clip: &AudioClip<F>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(|e| Error::Wav(e.to_string()))?;
    for &s in &clip.samples {
        let v = s.to_f().clamp(-1.0, 1.0);
        let q = (v * 32767.0).round() as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..256).map(|i| (i as f64 / 40.0).sin() * 0.8).collect();
        let clip = AudioClip::new(samples.clone(), 8000);
        save_wav(&path, &clip).unwrap();
        let back: AudioClip<f64> = load_wav(&path, 8000).unwrap();
        assert_eq!(back.len(), clip.len());
        assert_eq!(back.sample_rate_hz, 8000);
        for (a, b) in back.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 2.0 / 32768.0, "{a} vs {b}");
        }
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8000,
            bits_per_sample: 16,
            sample_format: SampleFormat::Int,
        };
        let mut w = WavWriter::create(&path, spec).unwrap();
        for _ in 0..32 {
            w.write_sample(0i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        assert!(load_wav::<f64>(&path, 8000).is_err());
    }

    #[test]
    fn resample_halves_and_preserves_constants() {
        let clip = AudioClip::new(vec![0.5f64; 1000], 16000);
        let down = resample(&clip, 8000);
        assert_eq!(down.sample_rate_hz, 8000);
        assert_eq!(down.len(), 500);
        assert!(down.samples.iter().all(|&s| (s - 0.5).abs() < 1e-12));

        // linear ramp stays linear under interpolation
        let ramp = AudioClip::new((0..100).map(|i| i as f64).collect::<Vec<_>>(), 8000);
        let up = resample(&ramp, 16000);
        assert_eq!(up.len(), 200);
        for (i, &s) in up.samples.iter().enumerate().take(197) {
            assert!((s - i as f64 * 0.5).abs() < 1e-9);
        }
    }
}

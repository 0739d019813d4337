//! Waveform/spectrogram transforms, mixing, masks, and reconstruction.
//!
//! All functions are pure; a [`SpectrogramConfig`] pins the analysis
//! geometry. The log-frequency warp and its nearest-bin inverse are
//! table driven so the same tables serve the forward transform, the
//! mask inverse, and the tests that recompute them independently.

use ndarray::Array2;
use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mono waveform with its sample rate.
#[derive(Debug, Clone)]
pub struct AudioClip<F: Scalar> {
    pub samples: Vec<F>,
    pub sample_rate_hz: u32,
}

impl<F: Scalar> AudioClip<F> {
    pub fn new(samples: Vec<F>, sample_rate_hz: u32) -> Self {
        AudioClip {
            samples,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Analysis geometry for the STFT pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
    pub sample_rate_hz: u32,
    pub clip_samples: usize,
    pub warp_bins: usize,
    /// Frame count of the warped grid fed to the separation network.
    pub frames: usize,
}

impl SpectrogramConfig {
    /// Reference geometry: 11025 Hz, 1022-sample Hann window, hop 256,
    /// 65280-sample clips, 512x256 linear grid warped to 256x256.
    pub fn reference() -> Self {
        SpectrogramConfig {
            window_len: 1022,
            hop_len: 256,
            fft_size: 1022,
            sample_rate_hz: 11025,
            clip_samples: 65280,
            warp_bins: 256,
            frames: 256,
        }
    }

    /// Desk geometry: 8000 Hz, window 254, hop 128, 8192-sample clips,
    /// 128-bin linear grid warped to a 64x64 network grid.
    pub fn desk() -> Self {
        SpectrogramConfig {
            window_len: 254,
            hop_len: 128,
            fft_size: 254,
            sample_rate_hz: 8000,
            clip_samples: 8192,
            warp_bins: 64,
            frames: 64,
        }
    }

    pub fn linear_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames the STFT actually produces (centered framing).
    pub fn frames_full(&self) -> usize {
        self.clip_samples / self.hop_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_len > self.window_len / 2 + 1 {
            return Err(Error::InvalidConfig(format!(
                "hop {} too large for window {}: frames must overlap",
                self.hop_len, self.window_len
            )));
        }
        if self.clip_samples % self.hop_len != 0 {
            return Err(Error::InvalidConfig(
                "clip_samples must be a multiple of hop_len".into(),
            ));
        }
        if self.fft_size < self.window_len {
            return Err(Error::InvalidConfig("fft_size below window_len".into()));
        }
        if !self.warp_bins.is_power_of_two() || !self.frames.is_power_of_two() {
            return Err(Error::InvalidConfig(
                "warp_bins and frames must be powers of two".into(),
            ));
        }
        if self.frames > self.frames_full() {
            return Err(Error::InvalidConfig(
                "frames exceeds the framing of clip_samples".into(),
            ));
        }
        Ok(())
    }
}

/// Linear-frequency complex STFT grid, `linear_bins x frames_full`.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram<F: Scalar> {
    pub values: Array2<Complex<F>>,
}

/// Nonnegative magnitude grid on the log-frequency axis,
/// `warp_bins x frames`.
#[derive(Debug, Clone)]
pub struct WarpedSpectrogram<F: Scalar> {
    pub values: Array2<F>,
}

impl<F: Scalar> WarpedSpectrogram<F> {
    pub fn shape(&self) -> (usize, usize) {
        let d = self.values.dim();
        (d.0, d.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    GroundTruth,
    Predicted,
}

/// Per-bin separation weights on the warped grid.
#[derive(Debug, Clone)]
pub struct SeparationMask<F: Scalar> {
    pub values: Array2<F>,
    pub kind: MaskKind,
}

fn hann<F: Scalar>(len: usize) -> Vec<F> {
    (0..len)
        .map(|i| {
            let x = std::f64::consts::TAU * i as f64 / len as f64;
            F::from_f(0.5 * (1.0 - x.cos()))
        })
        .collect()
}

/// Centered Hann STFT. Frame `f` is centered at sample `f * hop_len`.
pub fn stft<F: Scalar>(
    clip: &AudioClip<F>,
    cfg: &SpectrogramConfig,
) -> Result<ComplexSpectrogram<F>> {
    if clip.len() != cfg.clip_samples {
        return Err(Error::InvalidInput(format!(
            "clip length {} != configured {}",
            clip.len(),
            cfg.clip_samples
        )));
    }
    if clip.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("clip contains non-finite samples".into()));
    }
    let bins = cfg.linear_bins();
    let frames = cfg.frames_full();
    let window = hann::<F>(cfg.window_len);
    let half = cfg.window_len / 2;
    let mut planner = FftPlanner::<F>::new();
    let fft = planner.plan_fft_forward(cfg.fft_size);
    let mut out = Array2::zeros((bins, frames));
    let mut buf = vec![Complex::new(F::zero(), F::zero()); cfg.fft_size];
    for f in 0..frames {
        for v in buf.iter_mut() {
            *v = Complex::new(F::zero(), F::zero());
        }
        let center = f * cfg.hop_len;
        for (wi, &wv) in window.iter().enumerate() {
            let idx = center as isize + wi as isize - half as isize;
            if idx >= 0 && (idx as usize) < clip.len() {
                buf[wi] = Complex::new(clip.samples[idx as usize] * wv, F::zero());
            }
        }
        fft.process(&mut buf);
        for b in 0..bins {
            out[(b, f)] = buf[b];
        }
    }
    Ok(ComplexSpectrogram { values: out })
}

/// Overlap-add inverse of [`stft`] with squared-window normalization.
pub fn istft<F: Scalar>(
    spec: &ComplexSpectrogram<F>,
    cfg: &SpectrogramConfig,
) -> Result<AudioClip<F>> {
    let bins = cfg.linear_bins();
    let frames = cfg.frames_full();
    if spec.values.dim() != (bins, frames) {
        return Err(Error::ShapeMismatch(format!(
            "spectrogram {:?}, expected ({}, {})",
            spec.values.dim(),
            bins,
            frames
        )));
    }
    let window = hann::<F>(cfg.window_len);
    let half = cfg.window_len / 2;
    let mut planner = FftPlanner::<F>::new();
    let ifft = planner.plan_fft_inverse(cfg.fft_size);
    let scale = F::one() / F::from_f(cfg.fft_size as f64);
    let mut acc = vec![F::zero(); cfg.clip_samples];
    let mut weight = vec![F::zero(); cfg.clip_samples];
    let mut buf = vec![Complex::new(F::zero(), F::zero()); cfg.fft_size];
    for f in 0..frames {
        for b in 0..bins {
            buf[b] = spec.values[(b, f)];
        }
        // restore conjugate-symmetric upper half
        for b in bins..cfg.fft_size {
            buf[b] = spec.values[(cfg.fft_size - b, f)].conj();
        }
        ifft.process(&mut buf);
        let center = f * cfg.hop_len;
        for (wi, &wv) in window.iter().enumerate() {
            let idx = center as isize + wi as isize - half as isize;
            if idx >= 0 && (idx as usize) < cfg.clip_samples {
                let i = idx as usize;
                acc[i] += buf[wi].re * scale * wv;
                weight[i] += wv * wv;
            }
        }
    }
    let eps = F::from_f(1e-8);
    for (a, w) in acc.iter_mut().zip(&weight) {
        if *w > eps {
            *a = *a / *w;
        } else {
            *a = F::zero();
        }
    }
    Ok(AudioClip::new(acc, cfg.sample_rate_hz))
}

/// Magnitudes of a complex grid.
pub fn magnitude<F: Scalar>(spec: &ComplexSpectrogram<F>) -> Array2<F> {
    spec.values.mapv(|c| c.norm())
}

/// Interpolation table from linear bins to geometrically spaced warped
/// bins. Row `j` holds `(bin, weight)` pairs with weights summing to 1.
pub fn warp_table(cfg: &SpectrogramConfig) -> Vec<Vec<(usize, f64)>> {
    let bins = cfg.linear_bins();
    let n = cfg.warp_bins;
    let p_min = 1.0;
    let p_max = (bins - 1) as f64;
    let mut rows = Vec::with_capacity(n);
    for j in 0..n {
        let t = j as f64 / (n - 1) as f64;
        let pos = p_min * (p_max / p_min).powf(t);
        let k = pos.floor() as usize;
        let frac = pos - k as f64;
        let mut row = Vec::new();
        if j == 0 {
            // fold DC into the first warped bin
            row.push((0, 0.5));
            row.push((1, 0.5));
        } else if k + 1 >= bins || frac < 1e-12 {
            row.push((k.min(bins - 1), 1.0));
        } else {
            row.push((k, 1.0 - frac));
            row.push((k + 1, frac));
        }
        rows.push(row);
    }
    rows
}

/// Nearest warped bin for every linear bin, built from the same
/// geometric spacing as [`warp_table`].
pub fn unwarp_table(cfg: &SpectrogramConfig) -> Vec<usize> {
    let bins = cfg.linear_bins();
    let n = cfg.warp_bins;
    let p_max = (bins - 1) as f64;
    let centers: Vec<f64> = (0..n)
        .map(|j| p_max.powf(j as f64 / (n - 1) as f64))
        .collect();
    (0..bins)
        .map(|k| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &c) in centers.iter().enumerate() {
                let d = (c - k as f64).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Resample a linear-bin magnitude grid onto the log-frequency grid.
/// The input may carry more frames than `cfg.frames`; extra trailing
/// frames are dropped.
pub fn warp_log_frequency<F: Scalar>(
    spec_mag: &Array2<F>,
    cfg: &SpectrogramConfig,
) -> Result<WarpedSpectrogram<F>> {
    let (bins, frames_in) = spec_mag.dim();
    if bins != cfg.linear_bins() || frames_in < cfg.frames {
        return Err(Error::ShapeMismatch(format!(
            "magnitude grid {:?}, expected ({}, >={})",
            spec_mag.dim(),
            cfg.linear_bins(),
            cfg.frames
        )));
    }
    let table = warp_table(cfg);
    let mut out = Array2::zeros((cfg.warp_bins, cfg.frames));
    for (j, row) in table.iter().enumerate() {
        for t in 0..cfg.frames {
            let mut s = F::zero();
            for &(k, w) in row {
                s += spec_mag[(k, t)] * F::from_f(w);
            }
            out[(j, t)] = s;
        }
    }
    Ok(WarpedSpectrogram { values: out })
}

/// Expand a warped-grid mask to the linear grid: each linear bin takes
/// the value of its nearest warped bin.
pub fn unwarp_mask<F: Scalar>(
    mask: &SeparationMask<F>,
    cfg: &SpectrogramConfig,
) -> Result<Array2<F>> {
    let (wb, frames) = mask.values.dim();
    if wb != cfg.warp_bins || frames != cfg.frames {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?}, expected ({}, {})",
            mask.values.dim(),
            cfg.warp_bins,
            cfg.frames
        )));
    }
    let table = unwarp_table(cfg);
    let mut out = Array2::zeros((cfg.linear_bins(), frames));
    for (k, &j) in table.iter().enumerate() {
        for t in 0..frames {
            out[(k, t)] = mask.values[(j, t)];
        }
    }
    Ok(out)
}

/// Elementwise mean of equally shaped clips.
pub fn mix_waveforms<F: Scalar>(clips: &[AudioClip<F>]) -> Result<AudioClip<F>> {
    if clips.len() < 2 {
        return Err(Error::InvalidInput("need at least two clips to mix".into()));
    }
    let len = clips[0].len();
    let rate = clips[0].sample_rate_hz;
    for c in clips {
        if c.len() != len || c.sample_rate_hz != rate {
            return Err(Error::InvalidInput(
                "mixed clips must share length and sample rate".into(),
            ));
        }
    }
    let inv = F::from_f(1.0 / clips.len() as f64);
    let mut out = vec![F::zero(); len];
    for c in clips {
        for (o, &s) in out.iter_mut().zip(&c.samples) {
            *o += s;
        }
    }
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    Ok(AudioClip::new(out, rate))
}

/// Binary dominance mask: 1 where the source magnitude reaches the
/// mixture magnitude, ties included.
pub fn ground_truth_mask<F: Scalar>(
    source: &WarpedSpectrogram<F>,
    mixture: &WarpedSpectrogram<F>,
) -> Result<SeparationMask<F>> {
    if source.values.dim() != mixture.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "source {:?} vs mixture {:?}",
            source.values.dim(),
            mixture.values.dim()
        )));
    }
    let mut out = Array2::zeros(source.values.dim());
    for ((i, j), v) in source.values.indexed_iter() {
        out[(i, j)] = if *v >= mixture.values[(i, j)] {
            F::one()
        } else {
            F::zero()
        };
    }
    Ok(SeparationMask {
        values: out,
        kind: MaskKind::GroundTruth,
    })
}

/// Apply a warped-grid mask to the complex mixture spectrogram and
/// resynthesize. The mask is expanded to the linear grid, trailing
/// frames beyond the mask width reuse its last column, and the complex
/// values are scaled directly so the mixture phase is kept.
pub fn apply_mask_and_reconstruct<F: Scalar>(
    mix_complex: &ComplexSpectrogram<F>,
    mask: &SeparationMask<F>,
    cfg: &SpectrogramConfig,
) -> Result<AudioClip<F>> {
    let linear = unwarp_mask(mask, cfg)?;
    let (bins, frames_full) = mix_complex.values.dim();
    if bins != cfg.linear_bins() || frames_full != cfg.frames_full() {
        return Err(Error::ShapeMismatch(format!(
            "mixture {:?}, expected ({}, {})",
            mix_complex.values.dim(),
            cfg.linear_bins(),
            cfg.frames_full()
        )));
    }
    let mut masked = mix_complex.values.clone();
    for b in 0..bins {
        for t in 0..frames_full {
            let col = t.min(cfg.frames - 1);
            let m = linear[(b, col)];
            masked[(b, t)] = masked[(b, t)] * m;
        }
    }
    istft(&ComplexSpectrogram { values: masked }, cfg)
}

/// Full path from a clip to the network-facing warped magnitude.
pub fn warped_magnitude<F: Scalar>(
    clip: &AudioClip<F>,
    cfg: &SpectrogramConfig,
) -> Result<WarpedSpectrogram<F>> {
    let spec = stft(clip, cfg)?;
    warp_log_frequency(&magnitude(&spec), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn noise_clip(cfg: &SpectrogramConfig, seed: u64) -> AudioClip<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..cfg.clip_samples)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        AudioClip::new(samples, cfg.sample_rate_hz)
    }

    fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let den: f64 = b.iter().map(|y| y * y).sum();
        (num / den.max(1e-300)).sqrt()
    }

    #[test]
    fn zero_clip_gives_zero_spectrogram() {
        let cfg = SpectrogramConfig::desk();
        let clip = AudioClip::new(vec![0.0; cfg.clip_samples], cfg.sample_rate_hz);
        let spec = stft(&clip, &cfg).unwrap();
        assert!(spec.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn sine_at_bin_center_concentrates_energy() {
        let cfg = SpectrogramConfig::desk();
        let bin = 20usize;
        let freq = bin as f64 * cfg.sample_rate_hz as f64 / cfg.fft_size as f64;
        let samples: Vec<f64> = (0..cfg.clip_samples)
            .map(|i| (std::f64::consts::TAU * freq * i as f64 / cfg.sample_rate_hz as f64).sin())
            .collect();
        let clip = AudioClip::new(samples.clone(), cfg.sample_rate_hz);
        let spec = stft(&clip, &cfg).unwrap();

        // oracle: direct DFT of one windowed interior frame
        let f = 30usize;
        let center = f * cfg.hop_len;
        let half = cfg.window_len / 2;
        let w = hann::<f64>(cfg.window_len);
        let mut direct = vec![0.0f64; cfg.linear_bins()];
        for (b, d) in direct.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (wi, &wv) in w.iter().enumerate() {
                let idx = center + wi - half;
                let x = samples[idx] * wv;
                let ang = -std::f64::consts::TAU * b as f64 * wi as f64 / cfg.fft_size as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *d = (re * re + im * im).sqrt();
        }
        for b in 0..cfg.linear_bins() {
            let got = spec.values[(b, f)].norm();
            assert!(
                (got - direct[b]).abs() < 1e-9,
                "bin {b}: {got} vs oracle {}",
                direct[b]
            );
        }

        // Hann spreads a bin-centered sine over bin and bin +- 1 only
        let total: f64 = (0..cfg.linear_bins())
            .map(|b| spec.values[(b, f)].norm_sqr())
            .sum();
        let lobe: f64 = (bin - 1..=bin + 1)
            .map(|b| spec.values[(b, f)].norm_sqr())
            .sum();
        assert!(lobe / total > 0.999, "energy concentration {}", lobe / total);
        let peak_bin = (0..cfg.linear_bins())
            .max_by(|&a, &b| {
                spec.values[(a, f)]
                    .norm()
                    .partial_cmp(&spec.values[(b, f)].norm())
                    .unwrap()
            })
            .unwrap();
        assert_eq!(peak_bin, bin);
    }

    #[test]
    fn reference_config_shape() {
        let cfg = SpectrogramConfig::reference();
        cfg.validate().unwrap();
        assert_eq!(cfg.linear_bins(), 512);
        assert_eq!(cfg.frames_full(), 256);
        let clip = noise_clip(&cfg, 1);
        let spec = stft(&clip, &cfg).unwrap();
        assert_eq!(spec.values.dim(), (512, 256));
        let warped = warp_log_frequency(&magnitude(&spec), &cfg).unwrap();
        assert_eq!(warped.shape(), (256, 256));
    }

    #[test]
    fn istft_round_trip_noise() {
        let cfg = SpectrogramConfig::desk();
        let clip = noise_clip(&cfg, 7);
        let spec = stft(&clip, &cfg).unwrap();
        let rec = istft(&spec, &cfg).unwrap();
        assert!(rel_l2(&rec.samples, &clip.samples) < 1e-10);
    }

    #[test]
    fn istft_zero_is_zero() {
        let cfg = SpectrogramConfig::desk();
        let spec = ComplexSpectrogram::<f64> {
            values: Array2::zeros((cfg.linear_bins(), cfg.frames_full())),
        };
        let rec = istft(&spec, &cfg).unwrap();
        assert!(rec.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn warp_constant_preserved_and_rows_normalized() {
        let cfg = SpectrogramConfig::desk();
        let c = 0.37f64;
        let grid = Array2::from_elem((cfg.linear_bins(), cfg.frames_full()), c);
        let warped = warp_log_frequency(&grid, &cfg).unwrap();
        assert_eq!(warped.shape(), (cfg.warp_bins, cfg.frames));
        for v in warped.values.iter() {
            assert!((v - c).abs() < 1e-12);
        }
        for row in warp_table(&cfg) {
            let s: f64 = row.iter().map(|&(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&(_, w)| w >= 0.0));
        }
    }

    #[test]
    fn warp_table_matches_direct_log_spacing() {
        // independent recomputation of the mapping positions
        let cfg = SpectrogramConfig::desk();
        let table = warp_table(&cfg);
        let bins = cfg.linear_bins() as f64 - 1.0;
        for (j, row) in table.iter().enumerate().skip(1) {
            let pos = bins.powf(j as f64 / (cfg.warp_bins - 1) as f64);
            let expect: f64 = row.iter().map(|&(k, w)| k as f64 * w).sum();
            assert!(
                (expect - pos).abs() < 1e-9,
                "row {j}: weighted bin {expect} vs position {pos}"
            );
        }
        // in the sparse high-frequency region, a single nonzero linear
        // bin lights a contiguous run of warped bins
        let k = cfg.linear_bins() - 10;
        let mut grid = Array2::zeros((cfg.linear_bins(), cfg.frames_full()));
        grid[(k, 0)] = 1.0;
        let warped = warp_log_frequency(&grid, &cfg).unwrap();
        let nonzero: Vec<usize> = (0..cfg.warp_bins)
            .filter(|&j| warped.values[(j, 0)] > 0.0)
            .collect();
        assert!(!nonzero.is_empty());
        assert!(nonzero.len() <= 2, "nonzero warped bins {:?}", nonzero);
        assert!(nonzero.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn unwarp_matches_brute_force_nearest() {
        let cfg = SpectrogramConfig::desk();
        let table = unwarp_table(&cfg);
        let bins = cfg.linear_bins();
        let centers: Vec<f64> = (0..cfg.warp_bins)
            .map(|j| ((bins - 1) as f64).powf(j as f64 / (cfg.warp_bins - 1) as f64))
            .collect();
        for (k, &j) in table.iter().enumerate() {
            let best = centers
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 - k as f64)
                        .abs()
                        .partial_cmp(&(b.1 - k as f64).abs())
                        .unwrap()
                })
                .unwrap()
                .0;
            assert_eq!(j, best, "linear bin {k}");
        }
    }

    #[test]
    fn unwarp_constant_masks() {
        let cfg = SpectrogramConfig::desk();
        for fill in [0.0f64, 1.0] {
            let mask = SeparationMask {
                values: Array2::from_elem((cfg.warp_bins, cfg.frames), fill),
                kind: MaskKind::Predicted,
            };
            let lin = unwarp_mask(&mask, &cfg).unwrap();
            assert!(lin.iter().all(|&v| v == fill));
        }
    }

    #[test]
    fn unwarp_indicator_is_contiguous_range() {
        let cfg = SpectrogramConfig::desk();
        let j = 40usize;
        let mut mask = SeparationMask {
            values: Array2::zeros((cfg.warp_bins, cfg.frames)),
            kind: MaskKind::Predicted,
        };
        for t in 0..cfg.frames {
            mask.values[(j, t)] = 1.0;
        }
        let lin = unwarp_mask(&mask, &cfg).unwrap();
        let table = unwarp_table(&cfg);
        for (k, &jj) in table.iter().enumerate() {
            let expect = if jj == j { 1.0 } else { 0.0 };
            assert_eq!(lin[(k, 0)], expect);
        }
        let hits: Vec<usize> = table
            .iter()
            .enumerate()
            .filter(|&(_, &jj)| jj == j)
            .map(|(k, _)| k)
            .collect();
        assert!(hits.windows(2).all(|w| w[1] == w[0] + 1));
    }

    #[test]
    fn mixing_identities() {
        let cfg = SpectrogramConfig::desk();
        let w = noise_clip(&cfg, 2);
        let mixed = mix_waveforms(&[w.clone(), w.clone()]).unwrap();
        for (a, b) in mixed.samples.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-15);
        }
        let neg = AudioClip::new(w.samples.iter().map(|s| -s).collect(), cfg.sample_rate_hz);
        let cancel = mix_waveforms(&[w.clone(), neg]).unwrap();
        assert!(cancel.samples.iter().all(|&s| s.abs() < 1e-15));

        let clips = [noise_clip(&cfg, 3), noise_clip(&cfg, 4), noise_clip(&cfg, 5)];
        let mixed = mix_waveforms(&clips).unwrap();
        for i in 0..cfg.clip_samples {
            let naive = (clips[0].samples[i] + clips[1].samples[i] + clips[2].samples[i]) / 3.0;
            assert!((mixed.samples[i] - naive).abs() < 1e-14);
        }
    }

    #[test]
    fn mixing_rejects_mismatch() {
        let a = AudioClip::new(vec![0.0; 10], 8000);
        let b = AudioClip::new(vec![0.0; 11], 8000);
        assert!(mix_waveforms(&[a.clone(), b]).is_err());
        let c = AudioClip::new(vec![0.0; 10], 11025);
        assert!(mix_waveforms(&[a, c]).is_err());
    }

    #[test]
    fn ground_truth_mask_examples() {
        let s = WarpedSpectrogram {
            values: Array2::from_shape_vec((2, 2), vec![0.6, 0.1, 0.3, 0.3]).unwrap(),
        };
        let m = WarpedSpectrogram {
            values: Array2::from_shape_vec((2, 2), vec![0.5, 0.2, 0.3, 0.4]).unwrap(),
        };
        let mask = ground_truth_mask(&s, &m).unwrap();
        assert_eq!(
            mask.values.as_slice().unwrap(),
            &[1.0, 0.0, 1.0, 0.0],
            "ties go to 1"
        );
        let same = ground_truth_mask(&s, &s).unwrap();
        assert!(same.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ground_truth_mask_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>());
        let b = Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>());
        let mask = ground_truth_mask(
            &WarpedSpectrogram { values: a.clone() },
            &WarpedSpectrogram { values: b.clone() },
        )
        .unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let expect = if a[(i, j)] >= b[(i, j)] { 1.0 } else { 0.0 };
                assert_eq!(mask.values[(i, j)], expect);
            }
        }
    }

    #[test]
    fn all_ones_mask_is_plain_round_trip() {
        let cfg = SpectrogramConfig::desk();
        let clip = noise_clip(&cfg, 11);
        let spec = stft(&clip, &cfg).unwrap();
        let ones = SeparationMask {
            values: Array2::from_elem((cfg.warp_bins, cfg.frames), 1.0),
            kind: MaskKind::Predicted,
        };
        let rec = apply_mask_and_reconstruct(&spec, &ones, &cfg).unwrap();
        let plain = istft(&spec, &cfg).unwrap();
        assert_eq!(rec.samples, plain.samples, "bit-identical to round trip");

        let zeros = SeparationMask {
            values: Array2::zeros((cfg.warp_bins, cfg.frames)),
            kind: MaskKind::Predicted,
        };
        let rec0 = apply_mask_and_reconstruct(&spec, &zeros, &cfg).unwrap();
        assert!(rec0.samples.iter().all(|&s| s == 0.0));
    }
}

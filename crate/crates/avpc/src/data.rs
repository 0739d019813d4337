//! Deterministic synthetic audio-visual dataset: parametric harmonic
//! "instrument" classes paired with toy glyph frames, plus manifests
//! and split handling.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{warped_magnitude, AudioClip, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vision::{FrameStack, VisionConfig};

pub const HARMONICS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub spec: SpectrogramConfig,
    pub vision: VisionConfig,
}

impl DataConfig {
    pub fn desk() -> Self {
        DataConfig {
            num_classes: 8,
            clips_per_class: 10,
            spec: SpectrogramConfig::desk(),
            vision: VisionConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.vision.validate()?;
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("need at least one class".into()));
        }
        if self.clips_per_class < 4 {
            return Err(Error::InvalidConfig(
                "need at least 4 clips per class (2 reserved for val/test)".into(),
            ));
        }
        let nyquist = self.spec.sample_rate_hz as f64 / 2.0;
        for c in 0..self.num_classes {
            let top = f0_of_class(c) * HARMONICS as f64;
            if top >= nyquist {
                return Err(Error::InvalidConfig(format!(
                    "class {c}: harmonic {HARMONICS} at {top:.1} Hz exceeds Nyquist {nyquist} Hz"
                )));
            }
        }
        Ok(())
    }
}

/// Fundamental of class `c`: 110 * 2^(c/3) Hz.
pub fn f0_of_class(c: usize) -> f64 {
    110.0 * (c as f64 / 3.0).exp2()
}

/// Harmonic decay exponent of class `c`: 0.5 + 0.25c.
pub fn decay_of_class(c: usize) -> f64 {
    0.5 + 0.25 * c as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dataset entry; `(class_id, seed)` fully determines the clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub id: String,
    pub class_id: usize,
    pub seed: u64,
    pub split: Split,
    pub f0_hz: f64,
    pub decay_p: f64,
    pub am_rate_hz: f64,
    pub am_depth: f64,
    pub hue: f64,
    pub glyph_size: usize,
}

fn clip_rng(class_id: usize, seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ class_id as u64)
}

/// Synthesis parameters drawn for `(class_id, seed)`.
fn clip_params(class_id: usize, seed: u64, num_classes: usize) -> (f64, f64, usize) {
    let mut rng = clip_rng(class_id, seed);
    let am_rate = 2.0 + rng.gen::<f64>() * 4.0;
    let hue = class_id as f64 / num_classes as f64;
    let glyph = 12 + class_id;
    let _ = hue;
    (am_rate, class_id as f64 / num_classes as f64, glyph)
}

/// Render one clip: a 5-harmonic tone with seeded phases and amplitude
/// modulation, peak-normalized to 0.9, plus three glyph frames whose
/// positions jitter per frame.
pub fn synth_clip<F: Scalar>(
    class_id: usize,
    seed: u64,
    cfg: &DataConfig,
) -> Result<(AudioClip<F>, FrameStack<F>)> {
    if class_id >= cfg.num_classes {
        return Err(Error::UnknownClass(class_id));
    }
    let mut rng = clip_rng(class_id, seed);
    let am_rate = 2.0 + rng.gen::<f64>() * 4.0;
    let am_depth = 0.4;
    let am_phase = rng.gen::<f64>() * std::f64::consts::TAU;
    let phases: Vec<f64> = (0..HARMONICS)
        .map(|_| rng.gen::<f64>() * std::f64::consts::TAU)
        .collect();
    let f0 = f0_of_class(class_id);
    let p = decay_of_class(class_id);
    let sr = cfg.spec.sample_rate_hz as f64;

    let mut samples = vec![0.0f64; cfg.spec.clip_samples];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for (h, &phi) in phases.iter().enumerate() {
            let hh = (h + 1) as f64;
            v += hh.powf(-p) * (std::f64::consts::TAU * hh * f0 * t + phi).sin();
        }
        let env = 1.0 - am_depth * (0.5 + 0.5 * (std::f64::consts::TAU * am_rate * t + am_phase).sin());
        *s = v * env;
    }
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        for s in samples.iter_mut() {
            *s *= g;
        }
    }
    let audio = AudioClip::new(samples.into_iter().map(F::from_f).collect(), cfg.spec.sample_rate_hz);

    let frames = render_frames::<F>(class_id, &mut rng, cfg)?;
    Ok((audio, frames))
}

fn hue_to_rgb(h: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).abs();
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    match h6 as usize {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn render_frames<F: Scalar>(
    class_id: usize,
    rng: &mut ChaCha8Rng,
    cfg: &DataConfig,
) -> Result<FrameStack<F>> {
    let side = cfg.vision.input_side;
    let glyph = 12 + class_id;
    let color = hue_to_rgb(class_id as f64 / cfg.num_classes as f64);
    let mut values = ArrayD::from_elem(IxDyn(&[cfg.vision.frames, 3, side, side]), F::from_f(0.05));
    for f in 0..cfg.vision.frames {
        let cy = (side / 2) as isize + rng.gen_range(-8..=8);
        let cx = (side / 2) as isize + rng.gen_range(-8..=8);
        let half = glyph as isize / 2;
        for dy in -half..=half {
            for dx in -half..=half {
                // even classes draw discs, odd classes squares
                if class_id % 2 == 0 && dy * dy + dx * dx > half * half {
                    continue;
                }
                let (y, x) = (cy + dy, cx + dx);
                if y >= 0 && x >= 0 && (y as usize) < side && (x as usize) < side {
                    for c in 0..3 {
                        values[[f, c, y as usize, x as usize]] = F::from_f(color[c]);
                    }
                }
            }
        }
    }
    FrameStack::new(values, &cfg.vision)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ClipRecord>,
}

impl DatasetManifest {
    pub fn split(&self, s: Split) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| r.split == s).collect()
    }

    /// One record object per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            writeln!(f)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(DatasetManifest { records })
    }
}

/// Enumerate every clip: per class, seed 0 goes to val, seed 1 to test,
/// the rest to train.
pub fn build_dataset(cfg: &DataConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut records = Vec::new();
    for c in 0..cfg.num_classes {
        for seed in 0..cfg.clips_per_class as u64 {
            let split = match seed {
                0 => Split::Val,
                1 => Split::Test,
                _ => Split::Train,
            };
            let (am_rate, hue, glyph) = clip_params(c, seed, cfg.num_classes);
            records.push(ClipRecord {
                id: format!("c{c:02}s{seed:04}"),
                class_id: c,
                seed,
                split,
                f0_hz: f0_of_class(c),
                decay_p: decay_of_class(c),
                am_rate_hz: am_rate,
                am_depth: 0.4,
                hue,
                glyph_size: glyph,
            });
        }
    }
    Ok(DatasetManifest { records })
}

/// Draw `n` records with pairwise-distinct classes, uniform over class
/// combinations, from one split.
pub fn sample_mixture<'m>(
    manifest: &'m DatasetManifest,
    split: Split,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<&'m ClipRecord>> {
    let pool = manifest.split(split);
    let mut classes: Vec<usize> = {
        let mut cs: Vec<usize> = pool.iter().map(|r| r.class_id).collect();
        cs.sort_unstable();
        cs.dedup();
        cs
    };
    if n > classes.len() {
        return Err(Error::InvalidInput(format!(
            "cannot draw {n} distinct classes from {}",
            classes.len()
        )));
    }
    classes.shuffle(rng);
    classes.truncate(n);
    let mut out = Vec::with_capacity(n);
    for c in classes {
        let members: Vec<&&ClipRecord> = pool.iter().filter(|r| r.class_id == c).collect();
        out.push(*members[rng.gen_range(0..members.len())]);
    }
    Ok(out)
}

/// Pairwise spectral-support check: any two classes may share less than
/// half of the smaller class's active warped bins.
pub fn check_class_separability(cfg: &DataConfig) -> Result<()> {
    cfg.validate()?;
    let mut supports = Vec::new();
    for c in 0..cfg.num_classes {
        let (audio, _) = synth_clip::<f64>(c, 2, cfg)?;
        let warped = warped_magnitude(&audio, &cfg.spec)?;
        let (bins, frames) = warped.shape();
        let mut profile = vec![0.0f64; bins];
        for b in 0..bins {
            for t in 0..frames {
                profile[b] += warped.values[(b, t)];
            }
        }
        let peak = profile.iter().cloned().fold(0.0f64, f64::max);
        let active: Vec<bool> = profile.iter().map(|&v| v > 0.3 * peak).collect();
        supports.push(active);
    }
    for i in 0..cfg.num_classes {
        for j in (i + 1)..cfg.num_classes {
            let ni = supports[i].iter().filter(|&&b| b).count();
            let nj = supports[j].iter().filter(|&&b| b).count();
            let both = supports[i]
                .iter()
                .zip(&supports[j])
                .filter(|(&a, &b)| a && b)
                .count();
            let union = (ni + nj - both).max(1);
            if both * 2 >= union {
                return Err(Error::InvalidConfig(format!(
                    "classes {i} and {j} share {both} of {union} active bins"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f0_formula() {
        assert!((f0_of_class(0) - 110.0).abs() < 1e-12);
        assert!((f0_of_class(3) - 220.0).abs() < 1e-12);
        assert!((f0_of_class(6) - 440.0).abs() < 1e-12);
    }

    #[test]
    fn synthesis_is_deterministic_and_normalized() {
        let cfg = DataConfig::desk();
        let (a1, v1) = synth_clip::<f64>(3, 7, &cfg).unwrap();
        let (a2, v2) = synth_clip::<f64>(3, 7, &cfg).unwrap();
        assert_eq!(a1.samples, a2.samples);
        assert_eq!(
            v1.values.as_slice().unwrap(),
            v2.values.as_slice().unwrap()
        );
        let peak = a1.samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        assert!((peak - 0.9).abs() < 1e-6, "peak {peak}");

        let (a3, _) = synth_clip::<f64>(3, 8, &cfg).unwrap();
        assert_ne!(a1.samples, a3.samples, "different seeds differ");
    }

    #[test]
    fn unknown_class_rejected() {
        let cfg = DataConfig::desk();
        assert!(synth_clip::<f64>(8, 0, &cfg).is_err());
    }

    #[test]
    fn dataset_counts_and_disjoint_splits() {
        let cfg = DataConfig::desk();
        let m = build_dataset(&cfg).unwrap();
        assert_eq!(m.split(Split::Train).len(), 64);
        assert_eq!(m.split(Split::Val).len(), 8);
        assert_eq!(m.split(Split::Test).len(), 8);
        let mut keys: Vec<(usize, u64)> = m.records.iter().map(|r| (r.class_id, r.seed)).collect();
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), m.records.len(), "no duplicate (class, seed)");
    }

    #[test]
    fn manifest_round_trip_identical() {
        let cfg = DataConfig::desk();
        let m = build_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.jsonl");
        let p2 = dir.path().join("b.jsonl");
        m.save(&p1).unwrap();
        build_dataset(&cfg).unwrap().save(&p2).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "rebuild is byte-identical"
        );
        let back = DatasetManifest::load(&p1).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mixture_sampling_distinct_and_seeded() {
        let cfg = DataConfig::desk();
        let m = build_dataset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = sample_mixture(&m, Split::Train, 8, &mut rng).unwrap();
        let mut cs: Vec<usize> = all.iter().map(|r| r.class_id).collect();
        cs.sort_unstable();
        assert_eq!(cs, (0..8).collect::<Vec<_>>());
        assert!(sample_mixture(&m, Split::Train, 9, &mut rng).is_err());

        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = sample_mixture(&m, Split::Train, 2, &mut r1).unwrap();
            let b = sample_mixture(&m, Split::Train, 2, &mut r2).unwrap();
            assert_eq!(
                a.iter().map(|r| r.id.clone()).collect::<Vec<_>>(),
                b.iter().map(|r| r.id.clone()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn pair_frequencies_near_uniform() {
        let cfg = DataConfig::desk();
        let m = build_dataset(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let draws = 10_000usize;
        let mut counts = std::collections::HashMap::new();
        for _ in 0..draws {
            let pair = sample_mixture(&m, Split::Train, 2, &mut rng).unwrap();
            let (a, b) = (pair[0].class_id, pair[1].class_id);
            *counts.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
        }
        let pairs = 8 * 7 / 2;
        assert_eq!(counts.len(), pairs);
        let p = 1.0 / pairs as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (&k, &c) in &counts {
            assert!(
                (c as f64 - mean).abs() < 3.0 * sigma,
                "pair {k:?}: {c} vs {mean:.1} +- {sigma:.1}"
            );
        }
    }

    #[test]
    fn classes_are_separable() {
        check_class_separability(&DataConfig::desk()).unwrap();
    }

    #[test]
    fn config_rejects_supra_nyquist_classes() {
        let mut cfg = DataConfig::desk();
        cfg.num_classes = 16; // class 15 top harmonic ~ 17.6 kHz
        assert!(cfg.validate().is_err());
    }


}

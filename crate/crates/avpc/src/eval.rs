//! Separation metrics (SDR/SIR/SAR), mask image-quality metrics
//! (PSNR, MS-SSIM), test-set evaluation, and the cycle sweep.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Split};
use crate::dsp::{apply_mask_and_reconstruct, AudioClip, MaskKind, SeparationMask};
use crate::error::{Error, Result};
use crate::model::{build_mixture, Model};
use crate::pcnet::run_inference;
use crate::scalar::Scalar;

pub const DB_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BssScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x.to_f() * y.to_f()).sum()
}

fn db_ratio(num: f64, den: f64) -> f64 {
    if den <= num * 1e-20 || den == 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

/// BSS-eval style decomposition with length-1 projection filters.
/// `s_target` is the orthogonal projection of the estimate onto the
/// target reference, `e_interf` the remainder of the projection onto
/// the span of all references, `e_artif` what is left.
pub fn bss_metrics<F: Scalar>(
    estimate: &AudioClip<F>,
    references: &[AudioClip<F>],
    target: usize,
) -> Result<BssScores> {
    if target >= references.len() {
        return Err(Error::InvalidInput(format!(
            "target index {target} out of {} references",
            references.len()
        )));
    }
    let n = estimate.len();
    if references.iter().any(|r| r.len() != n) {
        return Err(Error::ShapeMismatch(
            "estimate and references must share length".into(),
        ));
    }
    let t_energy = dot(&references[target].samples, &references[target].samples);
    if t_energy == 0.0 {
        return Err(Error::InvalidInput("zero-energy target reference".into()));
    }

    // least-squares coefficients for the projection onto span(refs)
    let k = references.len();
    let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
    let mut rhs = nalgebra::DVector::<f64>::zeros(k);
    for i in 0..k {
        for j in 0..k {
            gram[(i, j)] = dot(&references[i].samples, &references[j].samples);
        }
        rhs[i] = dot(&estimate.samples, &references[i].samples);
    }
    let coeffs = gram
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::InvalidInput(format!("degenerate references: {e}")))?;

    let alpha = rhs[target] / t_energy;
    let mut s_target_sq = 0.0;
    let mut e_interf_sq = 0.0;
    let mut e_artif_sq = 0.0;
    let mut target_plus_interf_sq = 0.0;
    for i in 0..n {
        let est = estimate.samples[i].to_f();
        let st = alpha * references[target].samples[i].to_f();
        let proj: f64 = (0..k)
            .map(|j| coeffs[j] * references[j].samples[i].to_f())
            .sum();
        let ei = proj - st;
        let ea = est - proj;
        s_target_sq += st * st;
        e_interf_sq += ei * ei;
        e_artif_sq += ea * ea;
        target_plus_interf_sq += proj * proj;
    }
    Ok(BssScores {
        sdr: db_ratio(s_target_sq, e_interf_sq + e_artif_sq),
        sir: db_ratio(s_target_sq, e_interf_sq),
        sar: db_ratio(target_plus_interf_sq, e_artif_sq),
    })
}

/// Peak signal-to-noise ratio with MAX = 1, capped at 100 dB.
pub fn psnr<F: Scalar>(pred: &SeparationMask<F>, gt: &SeparationMask<F>) -> Result<f64> {
    if pred.values.dim() != gt.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.values.dim(),
            gt.values.dim()
        )));
    }
    let n = pred.values.len() as f64;
    let mse: f64 = pred
        .values
        .iter()
        .zip(gt.values.iter())
        .map(|(&a, &b)| {
            let d = a.to_f() - b.to_f();
            d * d
        })
        .sum::<f64>()
        / n;
    if mse < 1e-10 {
        return Ok(DB_CAP);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 11;

fn gaussian_kernel() -> Vec<f64> {
    let sigma = 1.5;
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Gaussian-windowed SSIM pass over one scale; returns
/// (mean luminance term, mean contrast-structure term).
fn ssim_terms(a: &Array2<f64>, b: &Array2<f64>) -> (f64, f64) {
    let k = gaussian_kernel();
    let half = (SSIM_WINDOW / 2) as isize;
    let (h, w) = a.dim();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    // separable blur helper producing local means of an arbitrary map
    let blur = |src: &Array2<f64>| -> Array2<f64> {
        let mut tmp = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let jj = clamp(j as isize + ki as isize - half, w);
                    s += kv * src[(i, jj)];
                }
                tmp[(i, j)] = s;
            }
        }
        let mut out = Array2::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                let mut s = 0.0;
                for (ki, kv) in k.iter().enumerate() {
                    let ii = clamp(i as isize + ki as isize - half, h);
                    s += kv * tmp[(ii, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    };
    let mu_a = blur(a);
    let mu_b = blur(b);
    let aa = blur(&(a * a));
    let bb = blur(&(b * b));
    let ab = blur(&(a * b));
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..h {
        for j in 0..w {
            let (ma, mb) = (mu_a[(i, j)], mu_b[(i, j)]);
            let va = (aa[(i, j)] - ma * ma).max(0.0);
            let vb = (bb[(i, j)] - mb * mb).max(0.0);
            let cov = ab[(i, j)] - ma * mb;
            lum += (2.0 * ma * mb + SSIM_C1) / (ma * ma + mb * mb + SSIM_C1);
            cs += (2.0 * cov + SSIM_C2) / (va + vb + SSIM_C2);
        }
    }
    let n = (h * w) as f64;
    (lum / n, cs / n)
}

fn downsample(a: &Array2<f64>) -> Array2<f64> {
    let (h, w) = a.dim();
    let (h2, w2) = (h / 2, w / 2);
    Array2::from_shape_fn((h2, w2), |(i, j)| {
        (a[(2 * i, 2 * j)] + a[(2 * i + 1, 2 * j)] + a[(2 * i, 2 * j + 1)] + a[(2 * i + 1, 2 * j + 1)])
            / 4.0
    })
}

/// Multi-scale SSIM with the standard 5-scale weights; scales are
/// dropped (and weights renormalized) until the coarsest scale still
/// fits the 11-pixel window.
pub fn ms_ssim<F: Scalar>(pred: &SeparationMask<F>, gt: &SeparationMask<F>) -> Result<f64> {
    if pred.values.dim() != gt.values.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            pred.values.dim(),
            gt.values.dim()
        )));
    }
    let mut a = pred.values.mapv(|v| v.to_f());
    let mut b = gt.values.mapv(|v| v.to_f());
    if a.iter().all(|&v| v == 0.0) && b.iter().all(|&v| v == 0.0) {
        return Err(Error::InvalidInput("constant-zero mask pair".into()));
    }
    let min_side = a.dim().0.min(a.dim().1);
    let mut scales = 1usize;
    while scales < 5 && (min_side >> scales) >= SSIM_WINDOW {
        scales += 1;
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let mut score = 1.0f64;
    for s in 0..scales {
        let (lum, cs) = ssim_terms(&a, &b);
        let weight = MSSSIM_WEIGHTS[s] / wsum;
        let term = if s + 1 == scales { lum * cs } else { cs };
        score *= term.max(0.0).powf(weight);
        if s + 1 < scales {
            a = downsample(&a);
            b = downsample(&b);
        }
    }
    Ok(score)
}

/// Metrics of one (mixture, source) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemMetrics {
    pub mixture: usize,
    pub clip_id: String,
    pub class_id: usize,
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
    pub mask_psnr: f64,
    pub mask_msssim: f64,
    /// Mixture-as-estimate SDR for the same source.
    pub baseline_sdr: f64,
    pub capped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub checkpoint: String,
    pub t_test: usize,
    pub sources_per_mixture: usize,
    pub seed: u64,
    pub items: Vec<ItemMetrics>,
    pub median_sdr: f64,
    pub mean_sdr: f64,
    pub median_sir: f64,
    pub mean_sir: f64,
    pub median_sar: f64,
    pub mean_sar: f64,
    pub mean_psnr: f64,
    pub mean_msssim: f64,
    pub median_baseline_sdr: f64,
    pub mean_baseline_sdr: f64,
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

impl MetricsReport {
    pub(crate) fn from_items(
        checkpoint: &str,
        t_test: usize,
        n: usize,
        seed: u64,
        items: Vec<ItemMetrics>,
    ) -> Self {
        let grab = |f: fn(&ItemMetrics) -> f64| items.iter().map(f).collect::<Vec<_>>();
        let mut sdr = grab(|i| i.sdr);
        let mut sir = grab(|i| i.sir);
        let mut sar = grab(|i| i.sar);
        let mut base = grab(|i| i.baseline_sdr);
        MetricsReport {
            checkpoint: checkpoint.to_string(),
            t_test,
            sources_per_mixture: n,
            seed,
            median_sdr: median(&mut sdr),
            mean_sdr: mean(&sdr),
            median_sir: median(&mut sir),
            mean_sir: mean(&sir),
            median_sar: median(&mut sar),
            mean_sar: mean(&sar),
            mean_psnr: mean(&grab(|i| i.mask_psnr)),
            mean_msssim: mean(&grab(|i| i.mask_msssim)),
            median_baseline_sdr: median(&mut base),
            mean_baseline_sdr: mean(&base),
            items,
        }
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "mixture,clip_id,class_id,sdr,sir,sar,mask_psnr,mask_msssim,baseline_sdr,capped"
        )?;
        for i in &self.items {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{}",
                i.mixture,
                i.clip_id,
                i.class_id,
                i.sdr,
                i.sir,
                i.sar,
                i.mask_psnr,
                i.mask_msssim,
                i.baseline_sdr,
                i.capped
            )?;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

/// Mask source selector for [`evaluate_testset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// Run the model.
    Predicted,
    /// Use the dominance ground truth (upper-bound run).
    Oracle,
    /// All-ones mask: estimate equals the mixture.
    Ones,
}

/// Score every clip of a split: each clip anchors one mixture with
/// `n - 1` seeded partners of other classes, and all `n` sources are
/// separated and scored.
pub fn evaluate_testset<F: Scalar>(
    model: &Model<F>,
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    t_test: usize,
    seed: u64,
    mask_source: MaskSource,
) -> Result<MetricsReport> {
    let pool = manifest.split(split);
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty split".into()));
    }
    let cfg = &model.data_cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6576_616c);
    let mut items = Vec::new();
    for (mi, anchor) in pool.iter().enumerate() {
        let mut records = vec![*anchor];
        let mut partners: Vec<&&crate::data::ClipRecord> = pool
            .iter()
            .filter(|r| r.class_id != anchor.class_id)
            .collect();
        partners.shuffle(&mut rng);
        let mut used = vec![anchor.class_id];
        for p in partners {
            if records.len() == n {
                break;
            }
            if !used.contains(&p.class_id) {
                used.push(p.class_id);
                records.push(*p);
            }
        }
        if records.len() < n {
            return Err(Error::InvalidInput(format!(
                "split has too few classes for {n}-source mixtures"
            )));
        }
        let ex = build_mixture::<F>(&records, cfg)?;
        for (si, rec) in ex.records.iter().enumerate() {
            let mask = match mask_source {
                MaskSource::Predicted => {
                    let feat = model.guidance_feature(rec, &ex.frames[si])?;
                    run_inference(&ex.mix_warped, &feat, &model.pcnet, t_test)?.0
                }
                MaskSource::Oracle => ex.gt_masks[si].clone(),
                MaskSource::Ones => SeparationMask {
                    values: Array2::from_elem(ex.gt_masks[si].values.dim(), F::one()),
                    kind: MaskKind::Predicted,
                },
            };
            let estimate = apply_mask_and_reconstruct(&ex.mix_complex, &mask, &cfg.spec)?;
            let scores = bss_metrics(&estimate, &ex.sources, si)?;
            let base = bss_metrics(&ex.mixture, &ex.sources, si)?;
            let p = psnr(&mask, &ex.gt_masks[si])?;
            let ms = ms_ssim(&mask, &ex.gt_masks[si])?;
            let capped = [scores.sdr, scores.sir, scores.sar, p]
                .iter()
                .any(|v| v.abs() >= DB_CAP);
            items.push(ItemMetrics {
                mixture: mi,
                clip_id: rec.id.clone(),
                class_id: rec.class_id,
                sdr: scores.sdr,
                sir: scores.sir,
                sar: scores.sar,
                mask_psnr: p,
                mask_msssim: ms,
                baseline_sdr: base.sdr,
                capped,
            });
        }
    }
    Ok(MetricsReport::from_items("", t_test, n, seed, items))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleRow {
    pub t: usize,
    pub mean_sdr: f64,
    pub mean_sir: f64,
    pub mean_sar: f64,
}

/// Mean separation scores of the trace mask at every cycle t = 1..=t_max,
/// averaged over `repeats` seeded evaluation passes.
pub fn cycle_sweep<F: Scalar>(
    model: &Model<F>,
    manifest: &DatasetManifest,
    split: Split,
    n: usize,
    t_max: usize,
    repeats: usize,
    base_seed: u64,
) -> Result<Vec<CycleRow>> {
    let pool = manifest.split(split);
    if pool.is_empty() {
        return Err(Error::InvalidInput("empty split".into()));
    }
    let cfg = &model.data_cfg;
    let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0usize); t_max];
    for rep in 0..repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(rep as u64) ^ 0x7377_6565);
        for anchor in &pool {
            let mut records = vec![*anchor];
            let mut partners: Vec<&&crate::data::ClipRecord> = pool
                .iter()
                .filter(|r| r.class_id != anchor.class_id)
                .collect();
            partners.shuffle(&mut rng);
            let mut used = vec![anchor.class_id];
            for p in partners {
                if records.len() == n {
                    break;
                }
                if !used.contains(&p.class_id) {
                    used.push(p.class_id);
                    records.push(*p);
                }
            }
            let ex = build_mixture::<F>(&records, cfg)?;
            for (si, rec) in ex.records.iter().enumerate() {
                let feat = model.guidance_feature(rec, &ex.frames[si])?;
                let (_, trace) = run_inference(&ex.mix_warped, &feat, &model.pcnet, t_max)?;
                for t in 1..=t_max {
                    let mask = SeparationMask {
                        values: trace.masks[t].clone(),
                        kind: MaskKind::Predicted,
                    };
                    let estimate = apply_mask_and_reconstruct(&ex.mix_complex, &mask, &cfg.spec)?;
                    let s = bss_metrics(&estimate, &ex.sources, si)?;
                    let slot = &mut acc[t - 1];
                    slot.0 += s.sdr;
                    slot.1 += s.sir;
                    slot.2 += s.sar;
                    slot.3 += 1;
                }
            }
        }
    }
    Ok(acc
        .into_iter()
        .enumerate()
        .map(|(i, (sdr, sir, sar, c))| CycleRow {
            t: i + 1,
            mean_sdr: sdr / c.max(1) as f64,
            mean_sir: sir / c.max(1) as f64,
            mean_sar: sar / c.max(1) as f64,
        })
        .collect())
}

pub fn save_cycle_csv(rows: &[CycleRow], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "t,mean_sdr,mean_sir,mean_sar")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.t, r.mean_sdr, r.mean_sir, r.mean_sar)?;
    }
    Ok(())
}

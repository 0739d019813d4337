//! End-to-end acceptance gate. Each numbered criterion prints one
//! PASS/FAIL line; the test fails if any criterion fails. Run with
//! `cargo test --test acceptance -- --nocapture` to watch progress.

use std::time::Instant;

use ndarray::{Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use avpc::data::{build_dataset, DataConfig, DatasetManifest, Split};
use avpc::dsp::{
    ground_truth_mask, istft, stft, AudioClip, SeparationMask, SpectrogramConfig,
    WarpedSpectrogram,
};
use avpc::eval::{bss_metrics, cycle_sweep, evaluate_testset, psnr, MaskSource};
use avpc::model::{Guidance, Model};
use avpc::pcnet::{run_inference, PcnetArch, PcnetParams};
use avpc::tensor::{conv_bwd_x, conv_fwd, Tape};
use avpc::training::{
    grad_check, mas_loss, ncs_loss, pretrain_rcop, projection_std, train_mas, RcopConfig,
    RcopHeads, TrainConfig,
};
use avpc::vision::{ClassTable, VisionConfig, VisionNet};

type C = Result<(), String>;

fn fail(msg: impl Into<String>) -> C {
    Err(msg.into())
}

fn ensure(cond: bool, msg: impl Into<String>) -> C {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn desk_model(seed: u64) -> Model<f64> {
    let cfg = DataConfig::desk();
    Model {
        data_cfg: cfg.clone(),
        pcnet: PcnetParams::init(PcnetArch::desk(), seed).unwrap(),
        vision: VisionNet::init(VisionConfig::desk(), seed).unwrap(),
        table: ClassTable::orthogonal_init(VisionConfig::desk(), cfg.num_classes, seed).unwrap(),
        guidance: Guidance::Class,
    }
}

// ---- straight-line oracle for the diagnostic recursion ---------------------
// Independent reimplementation of the update equations with naive loops;
// shares nothing with the tape kernels.

fn naive_conv(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut y = ArrayD::zeros(IxDyn(&[n, co, ho, wo]));
    for ni in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < wd {
                                    s += x[[ni, c, yi as usize, xj as usize]] * w[[o, c, ki, kj]];
                                }
                            }
                        }
                    }
                    y[[ni, o, i, j]] = s;
                }
            }
        }
    }
    y
}

fn naive_convt(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let (n, co, ho, wo) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ci, k) = (w.shape()[1], w.shape()[2]);
    let h = (ho - 1) * stride + k - 2 * pad;
    let mut y = ArrayD::zeros(IxDyn(&[n, ci, h, h]));
    for ni in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let g = x[[ni, o, i, j]];
                    for c in 0..ci {
                        for ki in 0..k {
                            for kj in 0..k {
                                let yi = (i * stride + ki) as isize - pad as isize;
                                let xj = (j * stride + kj) as isize - pad as isize;
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < h {
                                    y[[ni, c, yi as usize, xj as usize]] += g * w[[o, c, ki, kj]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn scale_ch(x: &ArrayD<f64>, c: &ArrayD<f64>) -> ArrayD<f64> {
    let mut y = x.clone();
    for ni in 0..x.shape()[0] {
        for cc in 0..x.shape()[1] {
            let f = c[[cc]];
            for i in 0..x.shape()[2] {
                for j in 0..x.shape()[3] {
                    y[[ni, cc, i, j]] *= f;
                }
            }
        }
    }
    y
}

struct OracleCycle {
    r: Vec<ArrayD<f64>>,
    p: Vec<ArrayD<f64>>,
    e: Vec<ArrayD<f64>>,
}

/// Diagnostic-mode recursion written straight from the update equations:
/// top-down init, t = 0 feedforward correction, then T cycles of one
/// feedback sweep (convex update, in place, top down) and one feedforward
/// sweep (additive error correction, in place, bottom up).
fn oracle_run(
    params: &PcnetParams<f64>,
    smix: &ArrayD<f64>,
    feat: &ArrayD<f64>,
    t_cycles: usize,
) -> Vec<OracleCycle> {
    let arch = &params.arch;
    let l_count = arch.layers;
    let (s, pd) = (arch.stride, arch.pad);
    let mut r_init: Vec<ArrayD<f64>> = vec![ArrayD::zeros(IxDyn(&[0])); l_count + 2];
    r_init[l_count + 1] = smix.clone();
    for l in (0..=l_count).rev() {
        r_init[l] = naive_conv(&r_init[l + 1], &params.kernels[l], s, pd);
    }

    let mut r = r_init.clone();
    r[0] = feat.clone();
    let mut e0 = vec![ArrayD::zeros(IxDyn(&[0])); l_count + 1];
    for l in 1..=l_count {
        e0[l - 1] = &r[l - 1] - &r_init[l - 1];
        let up = naive_convt(&e0[l - 1], &params.kernels[l - 1], s, pd);
        r[l] = &r_init[l] + &scale_ch(&up, &params.a[l - 1]);
    }
    let mut out = vec![OracleCycle {
        r: r.clone(),
        p: r_init.clone(),
        e: e0,
    }];
    let mut p = r_init;
    for _t in 1..=t_cycles {
        for l in (1..=l_count).rev() {
            p[l] = naive_conv(&r[l + 1], &params.kernels[l], s, pd);
            r[l] = &r[l] + &scale_ch(&(&p[l] - &r[l]), &params.b_raw[l - 1]);
        }
        p[0] = naive_conv(&r[1], &params.kernels[0], s, pd);
        let mut e = vec![ArrayD::zeros(IxDyn(&[0])); l_count + 1];
        for l in 1..=l_count {
            e[l - 1] = &r[l - 1] - &p[l - 1];
            let up = naive_convt(&e[l - 1], &params.kernels[l - 1], s, pd);
            r[l] = &r[l] + &scale_ch(&up, &params.a[l - 1]);
        }
        out.push(OracleCycle {
            r: r.clone(),
            p: p.clone(),
            e,
        });
    }
    out
}

fn max_abs_diff(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---- criteria --------------------------------------------------------------

fn c1_oracle_equivalence() -> C {
    let start = Instant::now();
    let mut arch = PcnetArch::desk();
    arch.linear_diagnostic = true;
    let mut params = PcnetParams::<f64>::init(arch.clone(), 8).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    // random but small a/b so the linear recursion stays bounded over 5 cycles
    for v in params.a.iter_mut().chain(params.b_raw.iter_mut()) {
        v.mapv_inplace(|_| rng.gen::<f64>() * 0.4);
    }
    let side = arch.input_side;
    let smix = WarpedSpectrogram {
        values: Array2::from_shape_fn((side, side), |_| rng.gen::<f64>()),
    };
    let feat = ndarray::Array3::from_shape_fn(
        (arch.feature_channels, arch.feature_side, arch.feature_side),
        |_| rng.gen::<f64>() - 0.5,
    );
    let t = 5;
    let (_, trace) = run_inference(&smix, &feat, &params, t).map_err(|e| e.to_string())?;

    let smix_d = ArrayD::from_shape_vec(
        IxDyn(&[1, 1, side, side]),
        smix.values.iter().cloned().collect(),
    )
    .unwrap();
    let feat_d = ArrayD::from_shape_vec(
        IxDyn(&[1, arch.feature_channels, arch.feature_side, arch.feature_side]),
        feat.iter().cloned().collect(),
    )
    .unwrap();
    let oracle = oracle_run(&params, &smix_d, &feat_d, t);

    ensure(trace.states.len() == t + 1, "trace length")?;
    let mut worst: f64 = 0.0;
    for (ti, (got, want)) in trace.states.iter().zip(&oracle).enumerate() {
        for l in 0..=arch.layers + 1 {
            if ti == 0 && l == 0 {
                continue; // both store the guidance feature there
            }
            ensure(
                got.r[l].shape() == want.r[l].shape(),
                format!("cycle {ti} level {l} r shape"),
            )?;
            worst = worst.max(max_abs_diff(&got.r[l], &want.r[l]));
            if l <= arch.layers {
                worst = worst.max(max_abs_diff(&got.p[l], &want.p[l]));
                // e_l as recorded by the oracle vs derived from the traced state
                if ti > 0 && l < arch.layers {
                    let e_trace = &got.r[l] - &got.p[l];
                    worst = worst.max(max_abs_diff(&e_trace, &want.e[l]));
                }
            }
        }
    }
    ensure(worst < 1e-10, format!("max abs error {worst:.3e}"))?;
    let dt = start.elapsed();
    ensure(dt.as_secs_f64() < 10.0, format!("runtime {dt:.2?} >= 10 s"))
}

fn c2_grad_check(manifest: &DatasetManifest) -> C {
    let start = Instant::now();
    let mut model = desk_model(1);
    let report = grad_check(&mut model, manifest, 3, 2, 0).map_err(|e| e.to_string())?;
    ensure(
        report.max_rel_err < 1e-4,
        format!("max rel err {:.3e}", report.max_rel_err),
    )?;
    let dt = start.elapsed();
    ensure(dt.as_secs_f64() < 120.0, format!("runtime {dt:.2?} >= 2 min"))
}

fn c3_feedback_contraction() -> C {
    let mut arch = PcnetArch::desk();
    arch.linear_diagnostic = true;
    let mut params = PcnetParams::<f64>::init(arch.clone(), 11).map_err(|e| e.to_string())?;
    let b_val = 0.37;
    for v in &mut params.b_raw {
        v.fill(b_val);
    }
    for v in &mut params.a {
        v.fill(0.0); // isolate the feedback half of the cycle
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let smix = WarpedSpectrogram {
        values: Array2::from_shape_fn((arch.input_side, arch.input_side), |_| rng.gen::<f64>()),
    };
    let feat = ndarray::Array3::from_shape_fn(
        (arch.feature_channels, arch.feature_side, arch.feature_side),
        |_| rng.gen::<f64>() - 0.5,
    );
    let (_, trace) = run_inference(&smix, &feat, &params, 1).map_err(|e| e.to_string())?;
    // layer L's prediction comes from the constant r_{L+1}, so the same p
    // applies before and after the update; lower layers see updated uppers
    let l = arch.layers;
    let p = &trace.states[1].p[l];
    let norm = |r: &ArrayD<f64>| {
        r.iter()
            .zip(p.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let d_before = norm(&trace.states[0].r[l]);
    let d_after = norm(&trace.states[1].r[l]);
    let want = (1.0 - b_val) * d_before;
    ensure(
        (d_after - want).abs() < 1e-12,
        format!("{d_after} vs {want}"),
    )
}

fn c4_adjointness() -> C {
    let arch = PcnetArch::desk();
    let params = PcnetParams::<f64>::init(arch.clone(), 13).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for l in 0..=arch.layers {
        let (si, so) = (arch.side(l + 1), arch.side(l));
        let (ci, co) = (arch.ch(l + 1), arch.ch(l));
        for pair in 0..100 {
            let x = ArrayD::from_shape_fn(IxDyn(&[1, ci, si, si]), |_| rng.gen::<f64>() - 0.5);
            let y = ArrayD::from_shape_fn(IxDyn(&[1, co, so, so]), |_| rng.gen::<f64>() - 0.5);
            let down = conv_fwd(&x, &params.kernels[l], arch.stride, arch.pad);
            let up = conv_bwd_x(&y, &params.kernels[l], arch.stride, arch.pad, si, si);
            let lhs: f64 = down.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(up.iter()).map(|(a, b)| a * b).sum();
            ensure(
                (lhs - rhs).abs() < 1e-10,
                format!("layer {l} pair {pair}: {lhs} vs {rhs}"),
            )?;
        }
    }
    Ok(())
}

fn c5_gt_mask_oracle() -> C {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for grid in 0..1000 {
        let source = WarpedSpectrogram::<f64> {
            values: Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>()),
        };
        let mixture = WarpedSpectrogram::<f64> {
            values: Array2::from_shape_fn((16, 16), |_| rng.gen::<f64>()),
        };
        let mask = ground_truth_mask(&source, &mixture).map_err(|e| e.to_string())?;
        for i in 0..16 {
            for j in 0..16 {
                let want = if source.values[(i, j)] >= mixture.values[(i, j)] {
                    1.0
                } else {
                    0.0
                };
                ensure(
                    mask.values[(i, j)] == want,
                    format!("grid {grid} at ({i},{j})"),
                )?;
            }
        }
    }
    Ok(())
}

fn c6_stft_round_trip() -> C {
    let cfg = SpectrogramConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for clip_i in 0..100 {
        let samples: Vec<f64> = (0..cfg.clip_samples)
            .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
            .collect();
        let clip = AudioClip::new(samples, cfg.sample_rate_hz);
        let spec = stft(&clip, &cfg).map_err(|e| e.to_string())?;
        let back = istft(&spec, &cfg).map_err(|e| e.to_string())?;
        ensure(back.len() == clip.len(), "length changed")?;
        let num: f64 = clip
            .samples
            .iter()
            .zip(&back.samples)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let den: f64 = clip.samples.iter().map(|a| a * a).sum();
        let rel = (num / den).sqrt();
        ensure(rel < 1e-10, format!("clip {clip_i}: rel L2 {rel:.3e}"))?;
    }
    Ok(())
}

fn c7_metric_oracles() -> C {
    let clip = |v: &[f64]| AudioClip::new(v.to_vec(), 8000);
    let s1 = clip(&[1.0, 0.0, 0.0, 0.0]);
    let s2 = clip(&[0.0, 1.0, 0.0, 0.0]);

    // estimate = target + interference: s_target = e_interf, no artifact
    let s = bss_metrics(&clip(&[1.0, 1.0, 0.0, 0.0]), &[s1.clone(), s2.clone()], 0)
        .map_err(|e| e.to_string())?;
    ensure(s.sdr.abs() < 1e-6, format!("sdr {}", s.sdr))?;
    ensure(s.sir.abs() < 1e-6, format!("sir {}", s.sir))?;
    ensure(s.sar >= 100.0 - 1e-6, format!("sar {}", s.sar))?;

    // estimate = target + artifact: no interference
    let s = bss_metrics(&clip(&[1.0, 0.0, 0.0, 1.0]), &[s1, s2], 0).map_err(|e| e.to_string())?;
    ensure(s.sdr.abs() < 1e-6, format!("sdr {}", s.sdr))?;
    ensure(s.sir >= 100.0 - 1e-6, format!("sir {}", s.sir))?;
    ensure(s.sar.abs() < 1e-6, format!("sar {}", s.sar))?;

    // BCE of the uniform 0.5 predictor is ln 2 for any binary target
    let pred = vec![SeparationMask::<f64> {
        values: Array2::from_elem((8, 8), 0.5),
        kind: avpc::dsp::MaskKind::Predicted,
    }];
    let gt = vec![SeparationMask::<f64> {
        values: Array2::from_shape_fn((8, 8), |(i, j)| ((i + j) % 2) as f64),
        kind: avpc::dsp::MaskKind::GroundTruth,
    }];
    let bce = mas_loss(&pred, &gt).map_err(|e| e.to_string())?;
    ensure(
        (bce - std::f64::consts::LN_2).abs() < 1e-6,
        format!("bce {bce}"),
    )?;

    // PSNR closed forms: constant offset 0.1 -> 20 dB; MSE 0.25 -> 6.0206 dB
    let mk = |v: Array2<f64>| SeparationMask {
        values: v,
        kind: avpc::dsp::MaskKind::Predicted,
    };
    let p = psnr(
        &mk(Array2::from_elem((8, 8), 0.1)),
        &mk(Array2::zeros((8, 8))),
    )
    .map_err(|e| e.to_string())?;
    ensure((p - 20.0).abs() < 1e-9, format!("psnr {p}"))?;
    let p = psnr(
        &mk(Array2::from_elem((8, 8), 0.5)),
        &mk(Array2::from_shape_fn((8, 8), |(i, j)| ((i + j) % 2) as f64)),
    )
    .map_err(|e| e.to_string())?;
    ensure(
        (p - 6.020599913279624).abs() < 1e-9,
        format!("psnr {p}"),
    )
}

fn c13_stop_grad() -> C {
    let mut tape = Tape::<f64>::new();
    let heads = RcopHeads::<f64>::init_dims(6, 8, 6, 4, 3);
    let bound = heads.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z1 = tape.leaf(
        ArrayD::from_shape_fn(IxDyn(&[4, 6]), |_| rng.gen::<f64>() + 0.1),
        true,
    );
    let z2 = tape.leaf(
        ArrayD::from_shape_fn(IxDyn(&[4, 6]), |_| rng.gen::<f64>() + 0.1),
        true,
    );
    let stopped = tape.detach(z2);
    let loss = ncs_loss(&mut tape, &bound, z1, stopped).map_err(|e| e.to_string())?;
    tape.backward(loss);
    // bit test: no gradient at all reaches the stopped branch
    ensure(tape.grad(z2).is_none(), "gradient leaked through StopGrad")?;
    let g1 = tape
        .grad(z1)
        .ok_or("no gradient on the open branch".to_string())?;
    ensure(
        g1.iter().any(|v| *v != 0.0),
        "open branch gradient identically zero",
    )
}

// criteria 8-12 share these trained models

struct Trained {
    scratch: Model<f64>,
    scratch_median_sdr: f64,
    baseline_median_sdr: f64,
    train_secs: f64,
}

fn train_scratch(manifest: &DatasetManifest) -> Result<Trained, String> {
    let mut model = desk_model(1);
    let cfg = TrainConfig::desk();
    let t0 = Instant::now();
    train_mas(&mut model, manifest, &cfg).map_err(|e| e.to_string())?;
    let train_secs = t0.elapsed().as_secs_f64();
    let report = evaluate_testset(&model, manifest, Split::Test, 2, 5, 99, MaskSource::Predicted)
        .map_err(|e| e.to_string())?;
    Ok(Trained {
        scratch: model,
        scratch_median_sdr: report.median_sdr,
        baseline_median_sdr: report.median_baseline_sdr,
        train_secs,
    })
}

fn c8_desk_separation(t: &Trained) -> C {
    ensure(
        t.train_secs < 1800.0,
        format!("training took {:.0} s >= 30 min", t.train_secs),
    )?;
    let gain = t.scratch_median_sdr - t.baseline_median_sdr;
    ensure(
        gain >= 3.0,
        format!(
            "median SDR {:.2} dB vs baseline {:.2} dB, gain {gain:.2} < 3 dB",
            t.scratch_median_sdr, t.baseline_median_sdr
        ),
    )
}

fn c9_cycle_consistency(t: &Trained, manifest: &DatasetManifest) -> C {
    let at = |tt: usize| {
        evaluate_testset(
            &t.scratch,
            manifest,
            Split::Test,
            2,
            tt,
            99,
            MaskSource::Predicted,
        )
        .map(|r| r.median_sdr)
        .map_err(|e| e.to_string())
    };
    let sdr5 = at(5)?;
    let sdr1 = at(1)?;
    ensure(
        sdr5 > sdr1,
        format!("T_test=5 median {sdr5:.2} dB !> T_test=1 median {sdr1:.2} dB"),
    )
}

fn c10_refinement_trend(t: &Trained, manifest: &DatasetManifest) -> C {
    let rows = cycle_sweep(&t.scratch, manifest, Split::Test, 2, 5, 10, 99)
        .map_err(|e| e.to_string())?;
    let mean_at = |tt: usize| {
        rows.iter()
            .find(|r| r.t == tt)
            .map(|r| r.mean_sdr)
            .ok_or(format!("no row for t={tt}"))
    };
    let m5 = mean_at(5)?;
    let m1 = mean_at(1)?;
    ensure(
        m5 >= m1,
        format!("mean SDR t=5 {m5:.2} dB < t=1 {m1:.2} dB over 10 seeds"),
    )
}

fn c11_training_cycles(t: &Trained, manifest: &DatasetManifest) -> C {
    let mut model = desk_model(1);
    let mut cfg = TrainConfig::desk();
    cfg.t_train = 1;
    train_mas(&mut model, manifest, &cfg).map_err(|e| e.to_string())?;
    let t1 = evaluate_testset(&model, manifest, Split::Test, 2, 5, 99, MaskSource::Predicted)
        .map_err(|e| e.to_string())?
        .median_sdr;
    let t5 = t.scratch_median_sdr;
    if (t5 - t1).abs() < 0.2 {
        println!("criterion 11: note: T_train=5 vs T_train=1 within 0.2 dB ({t5:.2} vs {t1:.2}), flagged for investigation");
    }
    ensure(
        t5 >= t1,
        format!("T_train=5 median {t5:.2} dB < T_train=1 median {t1:.2} dB"),
    )
}

fn c12_rcop(t: &Trained, manifest: &DatasetManifest) -> C {
    let mut model = desk_model(1);
    let mut heads = RcopHeads::<f64>::init(model.pcnet.arch.ch(model.pcnet.arch.layers), 0);
    let cfg = RcopConfig::desk();
    let report =
        pretrain_rcop(&mut model, &mut heads, manifest, &cfg).map_err(|e| e.to_string())?;
    let k = report.losses.len().min(10);
    let head: f64 = report.losses[..k].iter().sum::<f64>() / k as f64;
    let tail: f64 = report.losses[report.losses.len() - k..].iter().sum::<f64>() / k as f64;
    ensure(
        tail < head && tail < 0.0,
        format!("loss not decreasing toward -1: first {head:.3}, last {tail:.3}"),
    )?;
    let stds =
        projection_std(&model, &heads, manifest, Split::Val, 32, 5).map_err(|e| e.to_string())?;
    let min_std = stds.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(
        min_std > 0.01,
        format!("collapsed projections: min per-dim std {min_std:.4}"),
    )?;
    // fine-tune the pretrained backbone with the scratch model's budget
    train_mas(&mut model, manifest, &TrainConfig::desk()).map_err(|e| e.to_string())?;
    let rcop_sdr = evaluate_testset(&model, manifest, Split::Test, 2, 5, 99, MaskSource::Predicted)
        .map_err(|e| e.to_string())?
        .median_sdr;
    ensure(
        rcop_sdr >= t.scratch_median_sdr - 0.2,
        format!(
            "RCoP-init median SDR {rcop_sdr:.2} dB < scratch {:.2} dB - 0.2",
            t.scratch_median_sdr
        ),
    )
}

#[test]
fn acceptance() {
    let manifest = build_dataset(&DataConfig::desk()).expect("dataset");
    let tiny = {
        let mut c = DataConfig::desk();
        c.clips_per_class = 4;
        build_dataset(&c).expect("tiny dataset")
    };

    let mut results: Vec<(usize, &str, C)> = Vec::new();
    results.push((1, "diagnostic trajectories match straight-line oracle", c1_oracle_equivalence()));
    results.push((2, "analytic gradients match finite differences at T=3", c2_grad_check(&tiny)));
    results.push((3, "feedback update contracts by exactly 1-b", c3_feedback_contraction()));
    results.push((4, "tied Conv and TransConv are adjoint", c4_adjointness()));
    results.push((5, "ground-truth mask equals brute-force comparison", c5_gt_mask_oracle()));
    results.push((6, "STFT round trip below 1e-10", c6_stft_round_trip()));
    results.push((7, "metric oracles (bss, BCE, PSNR)", c7_metric_oracles()));
    results.push((13, "StopGrad passes zero gradient bit-exactly", c13_stop_grad()));

    let trained = train_scratch(&manifest);
    match &trained {
        Ok(t) => {
            results.push((8, "desk-scale training beats baseline by 3 dB", c8_desk_separation(t)));
            results.push((9, "T_test=5 beats T_test=1 on median SDR", c9_cycle_consistency(t, &manifest)));
            results.push((10, "mean SDR non-decreasing from t=1 to t=5", c10_refinement_trend(t, &manifest)));
            results.push((11, "T_train=5 at least matches T_train=1", c11_training_cycles(t, &manifest)));
            results.push((12, "RCoP pretraining works and does not hurt", c12_rcop(t, &manifest)));
        }
        Err(e) => {
            for n in 8..=12 {
                results.push((n, "desk-scale training", Err(format!("training failed: {e}"))));
            }
        }
    }

    results.sort_by_key(|r| r.0);
    let mut failed = 0;
    for (n, desc, res) in &results {
        match res {
            Ok(()) => println!("criterion {n}: PASS - {desc}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {n}: FAIL - {desc}: {msg}");
            }
        }
    }
    assert_eq!(failed, 0, "{failed} acceptance criteria failed");
}

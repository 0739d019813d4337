//! Command-line entry points tying the modules together. Every run
//! writes its resolved configuration next to its artifacts.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::data::{build_dataset, check_class_separability, Split};
use crate::dsp::{apply_mask_and_reconstruct, magnitude, mix_waveforms, stft, warp_log_frequency};
use crate::error::{Error, Result};
use crate::eval::{
    cycle_sweep, evaluate_testset, save_cycle_csv, ItemMetrics, MaskSource, MetricsReport,
};
use crate::model::{Guidance, Model};
use crate::pcnet::{run_inference, PcnetParams};
use crate::plot::{curve_plot, line_plot, Series};
use crate::training::{
    curriculum_train, grad_check, pretrain_rcop, train_mas_hooked, RcopHeads, TrainReport,
};
use crate::vision::{load_frames_png, ClassTable, VisionNet};
use crate::wav::{load_wav, save_wav};
use crate::Real;

#[derive(Parser)]
#[command(name = "avpc", about = "Visually guided sound source separation")]
pub struct Cli {
    /// Config file with section.key = value lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides train/rcop/eval seeds at once.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Checkpoint to start from or evaluate.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Config overrides, section.key=value. Repeatable.
    #[arg(long = "set", global = true)]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Synthesize the dataset and write its manifest.
    SynthData {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long = "per-class")]
        per_class: Option<usize>,
    },
    /// Mix-and-Separate training.
    Train,
    /// RCoP self-supervised pretraining.
    PretrainRcop,
    /// Sequential training stages at the configured source counts.
    Curriculum,
    /// Separate a mixture of WAV files.
    Separate {
        /// Comma-separated source WAVs to mix and separate.
        #[arg(long)]
        mix: String,
        /// Class id per source (class guidance), comma-separated.
        #[arg(long)]
        classes: Option<String>,
        /// Frame PNGs per source: paths ':'-joined, sources ','-joined.
        #[arg(long)]
        frames: Option<String>,
    },
    /// Score a dataset split.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long = "mask-source", default_value = "predicted")]
        mask_source: String,
    },
    /// Metrics at every inference cycle t = 1..=t_max.
    CycleSweep {
        #[arg(long = "t-max")]
        t_max: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Train and score feature-map shapes 1x1, 2x2, 4x4.
    ShapeSweep,
    /// Finite-difference check of the backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        t: usize,
        #[arg(long, default_value_t = 2)]
        coords: usize,
    },
    /// Rebuild aggregate tables from a per-item CSV.
    Report {
        #[arg(long)]
        items: PathBuf,
    },
}

pub fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Ok(workers) = std::env::var("AVPC_NUM_WORKERS") {
        let n: usize = workers
            .parse()
            .map_err(|_| Error::InvalidConfig("AVPC_NUM_WORKERS must be a number".into()))?;
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.rcop.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Command::SynthData { classes, per_class } = &cli.command {
        if let Some(c) = classes {
            cfg.data.num_classes = *c;
        }
        if let Some(p) = per_class {
            cfg.data.clips_per_class = *p;
        }
        cfg.validate()?;
    }
    std::fs::create_dir_all(&cli.out)?;
    std::fs::write(cli.out.join("config.txt"), cfg.render())?;

    match cli.command {
        Command::SynthData { .. } => synth_data(&cfg, &cli.out),
        Command::Train => train(&cfg, &cli.out, cli.checkpoint.as_deref()),
        Command::PretrainRcop => pretrain(&cfg, &cli.out, cli.checkpoint.as_deref()),
        Command::Curriculum => curriculum(&cfg, &cli.out, cli.checkpoint.as_deref()),
        Command::Separate {
            mix,
            classes,
            frames,
        } => separate(
            &cfg,
            &cli.out,
            required_ckpt(cli.checkpoint.as_deref())?,
            &mix,
            classes.as_deref(),
            frames.as_deref(),
        ),
        Command::Eval { split, mask_source } => eval_cmd(
            &cfg,
            &cli.out,
            required_ckpt(cli.checkpoint.as_deref())?,
            &split,
            &mask_source,
        ),
        Command::CycleSweep { t_max, repeats } => cycle_sweep_cmd(
            &cfg,
            &cli.out,
            required_ckpt(cli.checkpoint.as_deref())?,
            t_max,
            repeats,
        ),
        Command::ShapeSweep => shape_sweep(&cfg, &cli.out),
        Command::Gradcheck { t, coords } => gradcheck_cmd(&cfg, &cli.out, t, coords),
        Command::Report { items } => report_cmd(&cfg, &cli.out, &items),
    }
}

fn required_ckpt(c: Option<&Path>) -> Result<&Path> {
    c.ok_or_else(|| Error::InvalidInput("this command needs --checkpoint".into()))
}

fn fresh_model(cfg: &RunConfig, seed: u64) -> Result<Model<Real>> {
    let mut vision = VisionNet::init(cfg.data.vision.clone(), seed)?;
    vision.freeze_trunk = cfg.freeze_trunk;
    Ok(Model {
        data_cfg: cfg.data.clone(),
        pcnet: PcnetParams::init(cfg.arch.clone(), seed)?,
        vision,
        table: ClassTable::orthogonal_init(cfg.data.vision.clone(), cfg.data.num_classes, seed)?,
        guidance: cfg.guidance,
    })
}

fn load_or_fresh(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<(Model<Real>, Option<RcopHeads<Real>>)> {
    match checkpoint {
        Some(path) => {
            let (model, heads, _) = load_model::<Real>(path)?;
            Ok((model, heads))
        }
        None => Ok((fresh_model(cfg, cfg.train.seed)?, None)),
    }
}

fn save_curve(out: &Path, stem: &str, report: &TrainReport) -> Result<()> {
    report.save_csv(&out.join(format!("{stem}.csv")))?;
    curve_plot(&out.join(format!("{stem}.png")), stem, &report.losses)
}

fn synth_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    check_class_separability(&cfg.data)?;
    let manifest = build_dataset(&cfg.data)?;
    let path = out.join("manifest.jsonl");
    manifest.save(&path)?;
    let (tr, va, te) = (
        manifest.split(Split::Train).len(),
        manifest.split(Split::Val).len(),
        manifest.split(Split::Test).len(),
    );
    println!(
        "{} records ({tr} train / {va} val / {te} test) -> {}",
        manifest.records.len(),
        path.display()
    );
    Ok(())
}

fn train(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let manifest = build_dataset(&cfg.data)?;
    let (mut model, _) = load_or_fresh(cfg, checkpoint)?;
    let report = train_mas_hooked(&mut model, &manifest, &cfg.train, |epoch, snapshot| {
        save_model(
            snapshot,
            None,
            cfg.train.seed,
            cfg.train.n_sources,
            &out.join(format!("epoch_{epoch}.ckpt")),
        )
    })?;
    save_model(
        &model,
        None,
        cfg.train.seed,
        cfg.train.n_sources,
        &out.join("model.ckpt"),
    )?;
    save_curve(out, "train_loss", &report)?;
    println!(
        "{} steps, loss {:.4} -> {:.4}, checkpoint {}",
        report.losses.len(),
        report.losses.first().unwrap_or(&f64::NAN),
        report.losses.last().unwrap_or(&f64::NAN),
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn pretrain(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let manifest = build_dataset(&cfg.data)?;
    let (mut model, heads) = load_or_fresh(cfg, checkpoint)?;
    let mut heads = heads.unwrap_or_else(|| {
        RcopHeads::init(
            model.pcnet.arch.ch(model.pcnet.arch.layers),
            cfg.rcop.seed,
        )
    });
    let report = pretrain_rcop(&mut model, &mut heads, &manifest, &cfg.rcop)?;
    save_model(
        &model,
        Some(&heads),
        cfg.rcop.seed,
        2,
        &out.join("rcop.ckpt"),
    )?;
    save_curve(out, "rcop_loss", &report)?;
    println!(
        "{} steps, loss {:.4} -> {:.4}, checkpoint {}",
        report.losses.len(),
        report.losses.first().unwrap_or(&f64::NAN),
        report.losses.last().unwrap_or(&f64::NAN),
        out.join("rcop.ckpt").display()
    );
    Ok(())
}

fn curriculum(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    if cfg.stages.is_empty() {
        return Err(Error::InvalidConfig(
            "curriculum needs curriculum.stages (e.g. --set curriculum.stages=3,4)".into(),
        ));
    }
    let manifest = build_dataset(&cfg.data)?;
    let (mut model, _) = load_or_fresh(cfg, checkpoint)?;
    let reports = curriculum_train(&mut model, &manifest, &cfg.train, &cfg.stages)?;
    for (stage_n, report) in cfg.stages.iter().zip(&reports) {
        save_model(
            &model,
            None,
            cfg.train.seed,
            *stage_n,
            &out.join(format!("stage_n{stage_n}.ckpt")),
        )?;
        save_curve(out, &format!("curriculum_n{stage_n}_loss"), report)?;
    }
    save_model(
        &model,
        None,
        cfg.train.seed,
        *cfg.stages.last().unwrap(),
        &out.join("model.ckpt"),
    )?;
    println!(
        "{} stages done, final checkpoint tagged N={}",
        cfg.stages.len(),
        cfg.stages.last().unwrap()
    );
    Ok(())
}

fn separate(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    mix: &str,
    classes: Option<&str>,
    frames: Option<&str>,
) -> Result<()> {
    let (model, _, _) = load_model::<Real>(checkpoint)?;
    let spec = &model.data_cfg.spec;
    let paths: Vec<&str> = mix.split(',').filter(|s| !s.is_empty()).collect();
    if paths.len() < 2 {
        return Err(Error::InvalidInput("--mix needs at least two WAVs".into()));
    }
    let mut sources = Vec::with_capacity(paths.len());
    for p in &paths {
        let mut clip = load_wav::<Real>(Path::new(p), spec.sample_rate_hz)?;
        clip.samples.resize(spec.clip_samples, 0.0);
        sources.push(clip);
    }
    let mixture = mix_waveforms(&sources)?;
    let mix_complex = stft(&mixture, spec)?;
    let mix_warped = warp_log_frequency(&magnitude(&mix_complex), spec)?;

    let feats: Vec<ndarray::Array3<Real>> = match model.guidance {
        Guidance::Class => {
            let ids = classes.ok_or_else(|| {
                Error::InvalidInput("class-guided checkpoint needs --classes".into())
            })?;
            ids.split(',')
                .map(|c| {
                    let id: usize = c.trim().parse().map_err(|_| {
                        Error::InvalidInput(format!("bad class id '{c}'"))
                    })?;
                    Ok(crate::vision::encode_class(id, &model.table)?.channel_first())
                })
                .collect::<Result<_>>()?
        }
        Guidance::Frames => {
            let lists = frames.ok_or_else(|| {
                Error::InvalidInput("frame-guided checkpoint needs --frames".into())
            })?;
            lists
                .split(',')
                .map(|group| {
                    let ps: Vec<&Path> = group.split(':').map(Path::new).collect();
                    let stack = load_frames_png::<Real>(&ps, &model.data_cfg.vision)?;
                    Ok(model.vision.encode_frames(&stack)?.channel_first())
                })
                .collect::<Result<_>>()?
        }
    };
    if feats.len() != paths.len() {
        return Err(Error::InvalidInput(format!(
            "{} sources but {} guidance entries",
            paths.len(),
            feats.len()
        )));
    }

    for (i, feat) in feats.iter().enumerate() {
        let (mask, _) = run_inference(&mix_warped, feat, &model.pcnet, cfg.eval.t_test)?;
        let estimate = apply_mask_and_reconstruct(&mix_complex, &mask, spec)?;
        let wav_path = out.join(format!("source_{i}.wav"));
        save_wav(&wav_path, &estimate)?;
        let (h, w) = mask.values.dim();
        let mut img = image::GrayImage::new(w as u32, h as u32);
        for ((r, c), &v) in mask.values.indexed_iter() {
            // row 0 is the lowest frequency; draw it at the bottom
            img.put_pixel(
                c as u32,
                (h - 1 - r) as u32,
                image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]),
            );
        }
        let png_path = out.join(format!("mask_{i}.png"));
        img.save(&png_path)
            .map_err(|e| Error::InvalidInput(format!("png write: {e}")))?;
        println!("{} + {}", wav_path.display(), png_path.display());
    }
    Ok(())
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::InvalidInput(format!("unknown split '{s}'"))),
    }
}

fn eval_cmd(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    split: &str,
    mask_source: &str,
) -> Result<()> {
    let (model, _, _) = load_model::<Real>(checkpoint)?;
    let manifest = build_dataset(&model.data_cfg)?;
    let source = match mask_source {
        "predicted" => MaskSource::Predicted,
        "oracle" => MaskSource::Oracle,
        "ones" => MaskSource::Ones,
        _ => {
            return Err(Error::InvalidInput(format!(
                "mask source must be predicted|oracle|ones, got '{mask_source}'"
            )))
        }
    };
    let report = evaluate_testset(
        &model,
        &manifest,
        parse_split(split)?,
        cfg.eval.n_sources,
        cfg.eval.t_test,
        cfg.eval.seed,
        source,
    )?;
    report.save_csv(&out.join("items.csv"))?;
    report.save_json(&out.join("report.json"))?;
    println!(
        "{} items | SDR median {:.2} dB (baseline {:.2}) | SIR {:.2} | SAR {:.2} | PSNR {:.2} | MS-SSIM {:.4}",
        report.items.len(),
        report.median_sdr,
        report.median_baseline_sdr,
        report.median_sir,
        report.median_sar,
        report.mean_psnr,
        report.mean_msssim
    );
    Ok(())
}

fn cycle_sweep_cmd(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    t_max: Option<usize>,
    repeats: Option<usize>,
) -> Result<()> {
    let (model, _, _) = load_model::<Real>(checkpoint)?;
    let manifest = build_dataset(&model.data_cfg)?;
    let rows = cycle_sweep(
        &model,
        &manifest,
        Split::Test,
        cfg.eval.n_sources,
        t_max.unwrap_or(cfg.eval.t_max),
        repeats.unwrap_or(cfg.eval.repeats),
        cfg.eval.seed,
    )?;
    save_cycle_csv(&rows, &out.join("cycle_sweep.csv"))?;
    let series: Vec<Series<'_>> = [
        ("sdr", rows.iter().map(|r| (r.t as f64, r.mean_sdr)).collect()),
        ("sir", rows.iter().map(|r| (r.t as f64, r.mean_sir)).collect()),
        ("sar", rows.iter().map(|r| (r.t as f64, r.mean_sar)).collect()),
    ]
    .into_iter()
    .map(|(name, points)| Series { name, points })
    .collect();
    line_plot(&out.join("cycle_sweep.png"), &series)?;
    for r in &rows {
        println!(
            "t={} SDR {:.2} SIR {:.2} SAR {:.2}",
            r.t, r.mean_sdr, r.mean_sir, r.mean_sar
        );
    }
    Ok(())
}

fn shape_sweep(cfg: &RunConfig, out: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for hw in [1usize, 2, 4] {
        let mut c = cfg.clone();
        // pyramid depth fixes the top-level side: side >> (layers+1) = hw
        let mut layers = 0;
        while (c.arch.input_side >> (layers + 1)) > hw {
            layers += 1;
        }
        if c.arch.input_side >> (layers + 1) != hw {
            return Err(Error::InvalidConfig(format!(
                "input side {} cannot reach a {hw}x{hw} feature map",
                c.arch.input_side
            )));
        }
        let fill = *c.arch.channels.last().unwrap();
        c.arch.channels.resize(layers, fill);
        c.arch.layers = layers;
        c.arch.feature_side = hw;
        c.data.vision.feature_h = hw;
        c.data.vision.feature_w = hw;
        c.validate()?;
        let manifest = build_dataset(&c.data)?;
        let mut model = fresh_model(&c, c.train.seed)?;
        crate::training::train_mas(&mut model, &manifest, &c.train)?;
        let report = evaluate_testset(
            &model,
            &manifest,
            Split::Test,
            c.eval.n_sources,
            c.eval.t_test,
            c.eval.seed,
            MaskSource::Predicted,
        )?;
        println!("{hw}x{hw}: median SDR {:.2} dB", report.median_sdr);
        rows.push((hw, report.median_sdr, report.median_sir, report.median_sar));
    }
    let mut csv = String::from("shape,median_sdr,median_sir,median_sar\n");
    for (hw, sdr, sir, sar) in &rows {
        csv.push_str(&format!("{hw}x{hw},{sdr},{sir},{sar}\n"));
    }
    std::fs::write(out.join("shape_sweep.csv"), csv)?;
    let points = rows.iter().map(|r| (r.0 as f64, r.1)).collect();
    line_plot(
        &out.join("shape_sweep.png"),
        &[Series {
            name: "median_sdr",
            points,
        }],
    )?;
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &Path, t: usize, coords: usize) -> Result<()> {
    let manifest = build_dataset(&cfg.data)?;
    let mut model = fresh_model(cfg, cfg.train.seed)?;
    let report = grad_check(&mut model, &manifest, t, coords, cfg.train.seed)?;
    let f = std::fs::File::create(out.join("gradcheck.json"))?;
    serde_json::to_writer_pretty(f, &report)?;
    println!(
        "{} coordinates checked at T={t}, max relative error {:.3e}",
        report.entries.len(),
        report.max_rel_err
    );
    Ok(())
}

fn report_cmd(cfg: &RunConfig, out: &Path, items_csv: &Path) -> Result<()> {
    let text = std::fs::read_to_string(items_csv)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::InvalidInput(format!(
                "{}:{}: expected 10 columns",
                items_csv.display(),
                i + 1
            )));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::InvalidInput(format!("bad number '{s}'")))
        };
        items.push(ItemMetrics {
            mixture: f[0]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad index '{}'", f[0])))?,
            clip_id: f[1].to_string(),
            class_id: f[2]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad class '{}'", f[2])))?,
            sdr: num(f[3])?,
            sir: num(f[4])?,
            sar: num(f[5])?,
            mask_psnr: num(f[6])?,
            mask_msssim: num(f[7])?,
            baseline_sdr: num(f[8])?,
            capped: f[9] == "true",
        });
    }
    if items.is_empty() {
        return Err(Error::InvalidInput("no items in CSV".into()));
    }
    let report = MetricsReport::from_items(
        &items_csv.display().to_string(),
        cfg.eval.t_test,
        cfg.eval.n_sources,
        cfg.eval.seed,
        items,
    );
    report.save_json(&out.join("report.json"))?;
    println!(
        "{} items | SDR median {:.2} dB (baseline {:.2}) | SIR {:.2} | SAR {:.2}",
        report.items.len(),
        report.median_sdr,
        report.median_baseline_sdr,
        report.median_sir,
        report.median_sar
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetManifest;

    fn run_args(args: &[&str]) -> Result<()> {
        run(Cli::parse_from(args))
    }

    #[test]
    fn synth_data_counts_records() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        run_args(&[
            "avpc",
            "--out",
            out.to_str().unwrap(),
            "synth-data",
            "--classes",
            "8",
            "--per-class",
            "10",
        ])
        .unwrap();
        let manifest = DatasetManifest::load(&out.join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.records.len(), 80);
        assert!(out.join("config.txt").exists());
    }

    #[test]
    fn checkpoint_commands_require_the_flag() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let err = run_args(&[
            "avpc",
            "--out",
            out.to_str().unwrap(),
            "eval",
        ])
        .unwrap_err();
        assert!(format!("{err}").contains("--checkpoint"));
    }

    #[test]
    fn unknown_set_key_fails_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let err = run_args(&[
            "avpc",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "train.bogus=1",
            "synth-data",
        ])
        .unwrap_err();
        assert!(format!("{err}").contains("unknown key"));
        assert!(!out.exists(), "no artifacts on schema violation");
    }
}

//! Visual guidance features: a small strided convolutional encoder over
//! frame stacks, plus a per-class embedding table used when isolating
//! the separation network from real video input.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pooling {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub input_side: usize,
    pub frames: usize,
    pub feature_channels: usize,
    pub feature_h: usize,
    pub feature_w: usize,
    pub pooling: Pooling,
}

impl VisionConfig {
    pub fn desk() -> Self {
        VisionConfig {
            input_side: 64,
            frames: 3,
            feature_channels: 16,
            feature_h: 2,
            feature_w: 2,
            pooling: Pooling::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let trunk_out = self.input_side >> TRUNK_CHANNELS.len();
        if self.input_side >> TRUNK_CHANNELS.len() << TRUNK_CHANNELS.len() != self.input_side {
            return Err(Error::InvalidConfig(
                "input_side must be divisible by 16".into(),
            ));
        }
        if self.feature_h != self.feature_w {
            return Err(Error::InvalidConfig("feature grid must be square".into()));
        }
        if trunk_out % self.feature_h != 0 {
            return Err(Error::InvalidConfig(format!(
                "trunk output {trunk_out} not divisible by feature side {}",
                self.feature_h
            )));
        }
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frames must be at least 1".into()));
        }
        Ok(())
    }

    fn trunk_out_side(&self) -> usize {
        self.input_side >> TRUNK_CHANNELS.len()
    }

    fn extra_stride(&self) -> usize {
        self.trunk_out_side() / self.feature_h
    }
}

/// Stack of RGB frames from one clip, values in [0,1].
/// Layout: `[frames, 3, H, W]`.
#[derive(Debug, Clone)]
pub struct FrameStack<F: Scalar> {
    pub values: ArrayD<F>,
}

impl<F: Scalar> FrameStack<F> {
    pub fn new(values: ArrayD<F>, cfg: &VisionConfig) -> Result<Self> {
        let sh = values.shape();
        if sh.len() != 4 || sh[0] != cfg.frames || sh[1] != 3 || sh[2] != cfg.input_side
            || sh[3] != cfg.input_side
        {
            return Err(Error::ShapeMismatch(format!(
                "frame stack {:?}, expected [{}, 3, {}, {}]",
                sh, cfg.frames, cfg.input_side, cfg.input_side
            )));
        }
        if values.iter().any(|v| *v < F::zero() || *v > F::one()) {
            return Err(Error::InvalidInput("frame values must lie in [0,1]".into()));
        }
        Ok(FrameStack { values })
    }
}

/// Guidance map for one source, layout `[hat_h, hat_w, K]`.
#[derive(Debug, Clone)]
pub struct VisualFeature<F: Scalar> {
    pub values: Array3<F>,
}

impl<F: Scalar> VisualFeature<F> {
    /// Channel-first copy `[K, hat_h, hat_w]` for the separation network.
    pub fn channel_first(&self) -> Array3<F> {
        let (h, w, k) = self.values.dim();
        Array3::from_shape_fn((k, h, w), |(c, i, j)| self.values[(i, j, c)])
    }

    pub fn from_channel_first(cf: &Array3<F>) -> Self {
        let (k, h, w) = cf.dim();
        VisualFeature {
            values: Array3::from_shape_fn((h, w, k), |(i, j, c)| cf[(c, i, j)]),
        }
    }
}

const TRUNK_CHANNELS: [usize; 4] = [8, 16, 32, 32];

/// Frame encoder parameters: four stride-2 3x3 convolutions, then the
/// extra spatial convolution mapping the trunk grid to the guidance map.
#[derive(Debug, Clone)]
pub struct VisionNet<F: Scalar> {
    pub cfg: VisionConfig,
    pub trunk_w: Vec<ArrayD<F>>,
    pub trunk_b: Vec<ArrayD<F>>,
    pub extra_w: ArrayD<F>,
    pub extra_b: ArrayD<F>,
    /// Trunk updates are skipped by the optimizer when set; the extra
    /// convolution always trains.
    pub freeze_trunk: bool,
}

fn he_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            F::from_f(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

impl<F: Scalar> VisionNet<F> {
    pub fn init(cfg: VisionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7669_7375);
        let mut trunk_w = Vec::new();
        let mut trunk_b = Vec::new();
        let mut c_in = 3usize;
        for &c_out in &TRUNK_CHANNELS {
            trunk_w.push(he_init(&mut rng, &[c_out, c_in, 3, 3], c_in * 9));
            trunk_b.push(ArrayD::zeros(IxDyn(&[c_out])));
            c_in = c_out;
        }
        let extra_w = he_init(
            &mut rng,
            &[cfg.feature_channels, c_in, 3, 3],
            c_in * 9,
        );
        let extra_b = ArrayD::zeros(IxDyn(&[cfg.feature_channels]));
        Ok(VisionNet {
            cfg,
            trunk_w,
            trunk_b,
            extra_w,
            extra_b,
            freeze_trunk: false,
        })
    }

    /// Visit every parameter with a group label, in a fixed order shared
    /// with [`VisionNet::bind`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut ArrayD<F>)) {
        for w in &mut self.trunk_w {
            f("vision_trunk", w);
        }
        for b in &mut self.trunk_b {
            f("vision_trunk", b);
        }
        f("vision_extra", &mut self.extra_w);
        f("vision_extra", &mut self.extra_b);
    }

    pub fn visit(&self, mut f: impl FnMut(&'static str, &ArrayD<F>)) {
        for w in &self.trunk_w {
            f("vision_trunk", w);
        }
        for b in &self.trunk_b {
            f("vision_trunk", b);
        }
        f("vision_extra", &self.extra_w);
        f("vision_extra", &self.extra_b);
    }

    /// Register parameters on a tape. Order matches [`VisionNet::visit_mut`].
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundVision {
        let trunk_w: Vec<Var> = self
            .trunk_w
            .iter()
            .map(|w| tape.leaf(w.clone(), !self.freeze_trunk))
            .collect();
        let trunk_b: Vec<Var> = self
            .trunk_b
            .iter()
            .map(|b| tape.leaf(b.clone(), !self.freeze_trunk))
            .collect();
        let extra_w = tape.leaf(self.extra_w.clone(), true);
        let extra_b = tape.leaf(self.extra_b.clone(), true);
        BoundVision {
            trunk_w,
            trunk_b,
            extra_w,
            extra_b,
        }
    }

    /// Convenience eval path: encode one frame stack outside training.
    pub fn encode_frames(&self, frames: &FrameStack<F>) -> Result<VisualFeature<F>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let input = tape.constant(frames.values.clone());
        let out = forward_frames(&mut tape, &bound, input, &self.cfg)?;
        let data = tape.data(out);
        let sh = data.shape().to_vec();
        let cf = Array3::from_shape_vec(
            (sh[1], sh[2], sh[3]),
            data.iter().cloned().collect(),
        )
        .unwrap();
        Ok(VisualFeature::from_channel_first(&cf))
    }
}

/// Tape handles for a bound [`VisionNet`].
#[derive(Debug, Clone)]
pub struct BoundVision {
    pub trunk_w: Vec<Var>,
    pub trunk_b: Vec<Var>,
    pub extra_w: Var,
    pub extra_b: Var,
}

/// Encoder forward pass on a tape. `input` is `[B*frames, 3, H, W]`;
/// output is `[B, K, hat_h, hat_w]` after temporal pooling.
pub fn forward_frames<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundVision,
    input: Var,
    cfg: &VisionConfig,
) -> Result<Var> {
    let sh = tape.data(input).shape().to_vec();
    if sh.len() != 4 || sh[0] % cfg.frames != 0 || sh[1] != 3 || sh[2] != cfg.input_side
        || sh[3] != cfg.input_side
    {
        return Err(Error::ShapeMismatch(format!(
            "encoder input {:?}, expected [B*{}, 3, {}, {}]",
            sh, cfg.frames, cfg.input_side, cfg.input_side
        )));
    }
    let slope = F::from_f(0.2);
    let mut x = input;
    for (w, b) in bound.trunk_w.iter().zip(&bound.trunk_b) {
        x = tape.conv2d(x, *w, 2, 1);
        x = tape.add_channel(x, *b);
        x = tape.leaky_relu(x, slope);
    }
    x = tape.conv2d(x, bound.extra_w, cfg.extra_stride(), 1);
    x = tape.add_channel(x, bound.extra_b);
    let pooled = match cfg.pooling {
        Pooling::Mean => tape.mean_group(x, cfg.frames),
        Pooling::Max => tape.max_group(x, cfg.frames),
    };
    Ok(pooled)
}

/// Learnable per-class guidance embeddings, one row per class.
#[derive(Debug, Clone)]
pub struct ClassTable<F: Scalar> {
    pub cfg: VisionConfig,
    /// `[num_classes, K * hat_h * hat_w]`
    pub rows: Array2<F>,
}

impl<F: Scalar> ClassTable<F> {
    /// Rows are mutually orthogonal with unit norm (QR of a seeded
    /// Gaussian matrix). Requires `num_classes <= K * hat_h * hat_w`.
    pub fn orthogonal_init(cfg: VisionConfig, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let dim = cfg.feature_channels * cfg.feature_h * cfg.feature_w;
        if num_classes > dim {
            return Err(Error::InvalidConfig(format!(
                "{num_classes} classes exceed embedding dimension {dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_7362);
        let g = nalgebra::DMatrix::<f64>::from_fn(dim, num_classes, |_, _| {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        });
        let q = g.qr().q();
        let rows = Array2::from_shape_fn((num_classes, dim), |(r, c)| F::from_f(q[(c, r)]));
        Ok(ClassTable { cfg, rows })
    }

    pub fn num_classes(&self) -> usize {
        self.rows.nrows()
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut ArrayD<F>)) {
        // Array2 lacks a dyn view in place; round-trip through a dyn clone.
        let mut dyn_rows = self.rows.clone().into_dyn();
        f("class_table", &mut dyn_rows);
        self.rows = dyn_rows.into_dimensionality().unwrap();
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> Var {
        tape.leaf(self.rows.clone().into_dyn(), true)
    }
}

/// Look up fixed embeddings outside training.
pub fn encode_class<F: Scalar>(class_id: usize, table: &ClassTable<F>) -> Result<VisualFeature<F>> {
    if class_id >= table.num_classes() {
        return Err(Error::UnknownClass(class_id));
    }
    let cfg = &table.cfg;
    let row = table.rows.row(class_id);
    let cf = Array3::from_shape_vec(
        (cfg.feature_channels, cfg.feature_h, cfg.feature_w),
        row.iter().cloned().collect(),
    )
    .unwrap();
    Ok(VisualFeature::from_channel_first(&cf))
}

/// Select class embeddings on a tape, output `[B, K, hat_h, hat_w]`.
pub fn forward_classes<F: Scalar>(
    tape: &mut Tape<F>,
    table_var: Var,
    class_ids: &[usize],
    cfg: &VisionConfig,
) -> Result<Var> {
    let rows = tape.data(table_var).shape()[0];
    for &c in class_ids {
        if c >= rows {
            return Err(Error::UnknownClass(c));
        }
    }
    let sel = tape.select_rows(table_var, class_ids);
    Ok(tape.reshape(
        sel,
        &[
            class_ids.len(),
            cfg.feature_channels,
            cfg.feature_h,
            cfg.feature_w,
        ],
    ))
}

/// Load PNG frames (paths in temporal order) into a [`FrameStack`],
/// resizing to the configured square input.
pub fn load_frames_png<F: Scalar>(paths: &[&Path], cfg: &VisionConfig) -> Result<FrameStack<F>> {
    if paths.len() != cfg.frames {
        return Err(Error::InvalidInput(format!(
            "expected {} frames, got {}",
            cfg.frames,
            paths.len()
        )));
    }
    let side = cfg.input_side;
    let mut values = ArrayD::zeros(IxDyn(&[cfg.frames, 3, side, side]));
    for (fi, p) in paths.iter().enumerate() {
        let img = image::open(p)
            .map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?
            .to_rgb8();
        let img = image::imageops::resize(
            &img,
            side as u32,
            side as u32,
            image::imageops::FilterType::Triangle,
        );
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                values[[fi, c, y as usize, x as usize]] = F::from_f(px.0[c] as f64 / 255.0);
            }
        }
    }
    FrameStack::new(values, cfg)
}

//! Predictive-coding separation network: top-down initialization,
//! alternating feedback/feedforward cycles, and the mask head.
//!
//! One tape-based forward pass serves training and inference. Feedback
//! convolutions and feedforward transposed convolutions read the same
//! kernel variables, so weight tying holds by construction. A diagnostic
//! mode strips activations and normalization (and uses `b_raw` as `b`
//! directly) so the recursion can be checked against straight-line
//! reimplementations of the update equations.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{MaskKind, SeparationMask, WarpedSpectrogram};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcnetArch {
    pub input_side: usize,
    pub layers: usize,
    /// Channel width of r_l for l = 1..=layers.
    pub channels: Vec<usize>,
    pub feature_channels: usize,
    pub feature_side: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub slope: f64,
    pub t_train: usize,
    pub t_test: usize,
    /// Strip activations and normalization; `b_raw` is used as `b`.
    pub linear_diagnostic: bool,
    /// Give the feedforward path its own kernels instead of reusing the
    /// feedback ones transposed.
    pub untie_weights: bool,
}

impl PcnetArch {
    pub fn desk() -> Self {
        PcnetArch {
            input_side: 64,
            layers: 4,
            channels: vec![32, 32, 32, 32],
            feature_channels: 16,
            feature_side: 2,
            kernel: 4,
            stride: 2,
            pad: 1,
            slope: 0.2,
            t_train: 5,
            t_test: 5,
            linear_diagnostic: false,
            untie_weights: false,
        }
    }

    pub fn reference() -> Self {
        PcnetArch {
            input_side: 256,
            layers: 6,
            channels: vec![64, 64, 64, 64, 32, 32],
            feature_channels: 16,
            feature_side: 2,
            t_train: 5,
            t_test: 5,
            ..PcnetArch::desk()
        }
    }

    /// Channel width of level `l` (0 = guidance feature, layers+1 = mixture).
    pub fn ch(&self, level: usize) -> usize {
        if level == 0 {
            self.feature_channels
        } else if level <= self.layers {
            self.channels[level - 1]
        } else {
            1
        }
    }

    /// Spatial side of level `l`.
    pub fn side(&self, level: usize) -> usize {
        self.input_side >> (self.layers + 1 - level)
    }

    pub fn capacity(&self) -> usize {
        self.t_train.max(self.t_test)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.channels.len() != self.layers {
            return Err(Error::InvalidConfig(
                "channels must list one width per layer".into(),
            ));
        }
        if self.input_side >> (self.layers + 1) != self.feature_side
            || self.feature_side << (self.layers + 1) != self.input_side
        {
            return Err(Error::InvalidConfig(format!(
                "input side {} with {} layers does not reach feature side {}",
                self.input_side, self.layers, self.feature_side
            )));
        }
        if self.kernel != 2 * self.stride || self.pad * 2 != self.stride || self.stride == 0 {
            return Err(Error::InvalidConfig(
                "kernel/stride/pad must give an exact x2 spatial factor".into(),
            ));
        }
        Ok(())
    }
}

/// Running normalization statistics for one (layer, step, phase) slot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Running<F: Scalar> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> Running<F> {
    fn new(channels: usize) -> Self {
        Running {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }

    fn update(&mut self, mean: &[F], var: &[F]) {
        let m = F::from_f(0.1);
        let keep = F::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = *r * keep + b * m;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = *r * keep + b * m;
        }
    }
}

/// All running statistics, indexed by layer and time step.
///
/// `ff[t][l-1]` covers the feedforward update of layer `l` at cycle `t`
/// (t = 0 is the initial bottom-up pass); `fb[t-1][l-1]` covers the
/// feedback update at cycle `t >= 1`; `init[l-1]` the top-down
/// initialization; `input` the mixture normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormStats<F: Scalar> {
    pub capacity: usize,
    pub input: Running<F>,
    pub init: Vec<Running<F>>,
    pub ff: Vec<Vec<Running<F>>>,
    pub fb: Vec<Vec<Running<F>>>,
}

impl<F: Scalar> NormStats<F> {
    pub fn new(arch: &PcnetArch) -> Self {
        let cap = arch.capacity();
        let per_layer = || (1..=arch.layers).map(|l| Running::new(arch.ch(l))).collect();
        NormStats {
            capacity: cap,
            input: Running::new(1),
            init: per_layer(),
            ff: (0..=cap).map(|_| per_layer()).collect(),
            fb: (0..cap).map(|_| per_layer()).collect(),
        }
    }
}

/// Trainable parameters. `kernels[l]` (l = 0..=layers) connects level
/// l+1 to level l: it is the feedback convolution kernel, and its
/// transpose the feedforward path, shaped `[ch(l), ch(l+1), k, k]`.
#[derive(Debug, Clone)]
pub struct PcnetParams<F: Scalar> {
    pub arch: PcnetArch,
    pub kernels: Vec<ArrayD<F>>,
    /// Present only when `untie_weights` is set.
    pub kernels_up: Option<Vec<ArrayD<F>>>,
    /// Per-filter feedforward step sizes, layer 1..=L, shape `[ch(l)]`.
    pub a: Vec<ArrayD<F>>,
    /// Per-filter feedback gates before the sigmoid, layer 1..=L.
    pub b_raw: Vec<ArrayD<F>>,
    pub gamma: Vec<ArrayD<F>>,
    pub beta: Vec<ArrayD<F>>,
    pub in_gamma: ArrayD<F>,
    pub in_beta: ArrayD<F>,
    pub mask_w: ArrayD<F>,
    pub mask_b: ArrayD<F>,
    pub stats: NormStats<F>,
}

fn he_init<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            F::from_f(z * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

impl<F: Scalar> PcnetParams<F> {
    pub fn init(arch: PcnetArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7063_6e65);
        let k = arch.kernel;
        let mut kernels = Vec::new();
        for l in 0..=arch.layers {
            let (c_out, c_in) = (arch.ch(l), arch.ch(l + 1));
            kernels.push(he_init(&mut rng, &[c_out, c_in, k, k], c_in * k * k));
        }
        let kernels_up = if arch.untie_weights {
            Some(
                (0..=arch.layers)
                    .map(|l| {
                        let (c_out, c_in) = (arch.ch(l), arch.ch(l + 1));
                        he_init(&mut rng, &[c_out, c_in, k, k], c_in * k * k)
                    })
                    .collect(),
            )
        } else {
            None
        };
        let a = (1..=arch.layers)
            .map(|l| ArrayD::from_elem(IxDyn(&[arch.ch(l)]), F::one()))
            .collect();
        let b_raw = (1..=arch.layers)
            .map(|l| ArrayD::zeros(IxDyn(&[arch.ch(l)])))
            .collect();
        let gamma = (1..=arch.layers)
            .map(|l| ArrayD::from_elem(IxDyn(&[arch.ch(l)]), F::one()))
            .collect();
        let beta = (1..=arch.layers)
            .map(|l| ArrayD::zeros(IxDyn(&[arch.ch(l)])))
            .collect();
        let mask_w = he_init(
            &mut rng,
            &[arch.ch(arch.layers), 1, k, k],
            arch.ch(arch.layers) * k * k,
        );
        let stats = NormStats::new(&arch);
        Ok(PcnetParams {
            kernels,
            kernels_up,
            a,
            b_raw,
            gamma,
            beta,
            in_gamma: ArrayD::from_elem(IxDyn(&[1]), F::one()),
            in_beta: ArrayD::zeros(IxDyn(&[1])),
            mask_w,
            mask_b: ArrayD::zeros(IxDyn(&[1])),
            stats,
            arch,
        })
    }

    /// Visit parameters with group labels, order fixed and matching
    /// [`PcnetParams::bind`].
    pub fn visit_mut(&mut self, mut f: impl FnMut(&'static str, &mut ArrayD<F>)) {
        for w in &mut self.kernels {
            f("sep_kernel", w);
        }
        if let Some(up) = &mut self.kernels_up {
            for w in up {
                f("sep_kernel", w);
            }
        }
        for v in &mut self.a {
            f("sep_a", v);
        }
        for v in &mut self.b_raw {
            f("sep_b", v);
        }
        for v in &mut self.gamma {
            f("sep_bn", v);
        }
        for v in &mut self.beta {
            f("sep_bn", v);
        }
        f("sep_bn", &mut self.in_gamma);
        f("sep_bn", &mut self.in_beta);
        f("sep_mask", &mut self.mask_w);
        f("sep_mask", &mut self.mask_b);
    }

    pub fn visit(&self, mut f: impl FnMut(&'static str, &ArrayD<F>)) {
        for w in &self.kernels {
            f("sep_kernel", w);
        }
        if let Some(up) = &self.kernels_up {
            for w in up {
                f("sep_kernel", w);
            }
        }
        for v in &self.a {
            f("sep_a", v);
        }
        for v in &self.b_raw {
            f("sep_b", v);
        }
        for v in &self.gamma {
            f("sep_bn", v);
        }
        for v in &self.beta {
            f("sep_bn", v);
        }
        f("sep_bn", &self.in_gamma);
        f("sep_bn", &self.in_beta);
        f("sep_mask", &self.mask_w);
        f("sep_mask", &self.mask_b);
    }

    /// Register parameters on a tape. Order matches `visit_mut`.
    pub fn bind(&self, tape: &mut Tape<F>) -> BoundPcnet {
        BoundPcnet {
            kernels: self.kernels.iter().map(|w| tape.leaf(w.clone(), true)).collect(),
            kernels_up: self
                .kernels_up
                .as_ref()
                .map(|up| up.iter().map(|w| tape.leaf(w.clone(), true)).collect()),
            a: self.a.iter().map(|v| tape.leaf(v.clone(), true)).collect(),
            b_raw: self.b_raw.iter().map(|v| tape.leaf(v.clone(), true)).collect(),
            gamma: self.gamma.iter().map(|v| tape.leaf(v.clone(), true)).collect(),
            beta: self.beta.iter().map(|v| tape.leaf(v.clone(), true)).collect(),
            in_gamma: tape.leaf(self.in_gamma.clone(), true),
            in_beta: tape.leaf(self.in_beta.clone(), true),
            mask_w: tape.leaf(self.mask_w.clone(), true),
            mask_b: tape.leaf(self.mask_b.clone(), true),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BoundPcnet {
    pub kernels: Vec<Var>,
    pub kernels_up: Option<Vec<Var>>,
    pub a: Vec<Var>,
    pub b_raw: Vec<Var>,
    pub gamma: Vec<Var>,
    pub beta: Vec<Var>,
    pub in_gamma: Var,
    pub in_beta: Var,
    pub mask_w: Var,
    pub mask_b: Var,
}

/// Snapshot of every level at the end of one cycle (single sample,
/// channel-first arrays). Index by level: `r[0]` is the guidance
/// feature, `r[layers+1]` the normalized mixture; `p[l]` for l = 0..=L
/// holds the predictions produced by that cycle's feedback sweep (the
/// initialization pass stores `r_l^init` there).
#[derive(Debug, Clone)]
pub struct CycleState<F: Scalar> {
    pub t: usize,
    pub r: Vec<ArrayD<F>>,
    pub p: Vec<ArrayD<F>>,
}

/// Per-cycle record of one inference run, length T+1 (t = 0..=T).
#[derive(Debug, Clone)]
pub struct InferenceTrace<F: Scalar> {
    pub masks: Vec<Array2<F>>,
    pub e0_norms: Vec<f64>,
    /// `layer_energies[t][l-1]` = L2 norm of r_l at cycle t.
    pub layer_energies: Vec<Vec<f64>>,
    pub states: Vec<CycleState<F>>,
}

/// Tape handles produced by one forward run.
pub struct PcnetRun<F: Scalar> {
    /// Final mask, `[B, 1, S, S]`.
    pub mask: Var,
    /// Mask at every cycle (only when recording).
    pub cycle_masks: Vec<Var>,
    /// Final representation of layer L, `[B, ch(L), side, side]`.
    pub r_top: Var,
    pub trace: InferenceTrace<F>,
}

struct Fwd<'p> {
    arch: &'p PcnetArch,
    bound: &'p BoundPcnet,
    train: bool,
}

impl<'p> Fwd<'p> {
    /// BN through the per-layer affine against the given stats slot,
    /// then LeakyReLU. Identity in diagnostic mode.
    fn bn_act<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        layer: usize,
        slot: &mut Running<F>,
        act: bool,
    ) -> Var {
        if self.arch.linear_diagnostic {
            return x;
        }
        let (gamma, beta) = (self.bound.gamma[layer - 1], self.bound.beta[layer - 1]);
        let y = if self.train {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta);
            slot.update(&mean, &var);
            y
        } else {
            tape.batch_norm_eval(x, gamma, beta, &slot.mean, &slot.var)
        };
        if act {
            tape.leaky_relu(y, F::from_f(self.arch.slope))
        } else {
            y
        }
    }

    fn act<F: Scalar>(&self, tape: &mut Tape<F>, x: Var) -> Var {
        if self.arch.linear_diagnostic {
            x
        } else {
            tape.leaky_relu(x, F::from_f(self.arch.slope))
        }
    }

    fn up_kernel(&self, l: usize) -> Var {
        match &self.bound.kernels_up {
            Some(up) => up[l],
            None => self.bound.kernels[l],
        }
    }
}

/// Forward pass over a batch. `smix` is `[B, 1, S, S]`, `feat` is
/// `[B, K, hh, ww]`. Stats are updated only when `train` is set; the
/// recorded trace reports sample 0 of the batch.
#[allow(clippy::too_many_arguments)]
pub fn forward<F: Scalar>(
    tape: &mut Tape<F>,
    bound: &BoundPcnet,
    arch: &PcnetArch,
    stats: &mut NormStats<F>,
    smix: Var,
    feat: Var,
    t_cycles: usize,
    train: bool,
    record: bool,
) -> Result<PcnetRun<F>> {
    arch.validate()?;
    let l_count = arch.layers;
    let sh = tape.data(smix).shape().to_vec();
    if sh.len() != 4 || sh[1] != 1 || sh[2] != arch.input_side || sh[3] != arch.input_side {
        return Err(Error::ShapeMismatch(format!(
            "mixture {:?}, expected [B, 1, {}, {}]",
            sh, arch.input_side, arch.input_side
        )));
    }
    let fsh = tape.data(feat).shape().to_vec();
    if fsh != [sh[0], arch.feature_channels, arch.feature_side, arch.feature_side] {
        return Err(Error::ShapeMismatch(format!(
            "feature {:?}, expected [{}, {}, {}, {}]",
            fsh, sh[0], arch.feature_channels, arch.feature_side, arch.feature_side
        )));
    }
    if !arch.linear_diagnostic && t_cycles > stats.capacity {
        return Err(Error::CycleCapacity {
            requested: t_cycles,
            capacity: stats.capacity,
        });
    }
    let fwd = Fwd {
        arch,
        bound,
        train,
    };
    // feedback gates decoded on the tape so gradients reach b_raw
    let b: Vec<Var> = bound
        .b_raw
        .iter()
        .map(|&raw| {
            if arch.linear_diagnostic {
                raw
            } else {
                tape.sigmoid(raw)
            }
        })
        .collect();

    // r_{L+1}: normalized mixture, constant across cycles
    let r_top = if arch.linear_diagnostic {
        smix
    } else if train {
        let (y, mean, var) = tape.batch_norm_train(smix, bound.in_gamma, bound.in_beta);
        stats.input.update(&mean, &var);
        y
    } else {
        tape.batch_norm_eval(
            smix,
            bound.in_gamma,
            bound.in_beta,
            &stats.input.mean,
            &stats.input.var,
        )
    };

    // top-down initialization
    let mut r_init: Vec<Var> = vec![Var(0); l_count + 2];
    r_init[l_count + 1] = r_top;
    for l in (1..=l_count).rev() {
        let c = tape.conv2d(r_init[l + 1], bound.kernels[l], arch.stride, arch.pad);
        r_init[l] = fwd.bn_act(tape, c, l, &mut stats.init[l - 1], true);
    }
    let c0 = tape.conv2d(r_init[1], bound.kernels[0], arch.stride, arch.pad);
    r_init[0] = fwd.act(tape, c0);

    // initial bottom-up pass (t = 0): errors against the inits
    let mut r: Vec<Var> = r_init.clone();
    r[0] = feat;
    let mut p: Vec<Var> = r_init.clone();
    let mut e0_norm = 0.0f64;
    for l in 1..=l_count {
        let e = tape.sub(r[l - 1], r_init[l - 1]);
        if l == 1 {
            e0_norm = l2_norm(tape.data(e));
        }
        let up = tape.conv_transpose2d(e, fwd.up_kernel(l - 1), arch.stride, arch.pad);
        let step = tape.mul_channel(up, bound.a[l - 1]);
        let pre = tape.add(r_init[l], step);
        r[l] = fwd.bn_act(tape, pre, l, &mut stats.ff[0][l - 1], true);
    }

    let mut trace = InferenceTrace {
        masks: Vec::new(),
        e0_norms: vec![e0_norm],
        layer_energies: vec![energies(tape, &r, l_count)],
        states: Vec::new(),
    };
    let mut cycle_masks = Vec::new();
    let record_cycle = |tape: &mut Tape<F>,
                            trace: &mut InferenceTrace<F>,
                            cycle_masks: &mut Vec<Var>,
                            t: usize,
                            r: &[Var],
                            p: &[Var]| {
        if !record {
            return;
        }
        let m = mask_head(tape, bound, arch, r[l_count]);
        trace.masks.push(mask_plane(tape.data(m)));
        cycle_masks.push(m);
        trace.states.push(CycleState {
            t,
            r: r.iter().map(|&v| tape.data(v).clone()).collect(),
            p: p.iter().map(|&v| tape.data(v).clone()).collect(),
        });
    };
    record_cycle(tape, &mut trace, &mut cycle_masks, 0, &r, &p);

    for t in 1..=t_cycles {
        // feedback sweep, top down; each p_l reads the already-updated r_{l+1}
        // indices clamped: diagnostic mode may run past capacity but
        // never reads the slot
        let fb_t = (t - 1).min(stats.fb.len() - 1);
        let ff_t = t.min(stats.ff.len() - 1);
        for l in (1..=l_count).rev() {
            let pl = tape.conv2d(r[l + 1], bound.kernels[l], arch.stride, arch.pad);
            p[l] = pl;
            let delta = tape.sub(pl, r[l]);
            let gated = tape.mul_channel(delta, b[l - 1]);
            let pre = tape.add(r[l], gated);
            r[l] = fwd.bn_act(tape, pre, l, &mut stats.fb[fb_t][l - 1], true);
        }
        let p0 = tape.conv2d(r[1], bound.kernels[0], arch.stride, arch.pad);
        p[0] = fwd.act(tape, p0);

        // feedforward sweep, bottom up; e_{l-1} uses the freshest r_{l-1}
        for l in 1..=l_count {
            let e = tape.sub(r[l - 1], p[l - 1]);
            if l == 1 {
                trace.e0_norms.push(l2_norm(tape.data(e)));
            }
            let up = tape.conv_transpose2d(e, fwd.up_kernel(l - 1), arch.stride, arch.pad);
            let step = tape.mul_channel(up, bound.a[l - 1]);
            let pre = tape.add(r[l], step);
            r[l] = fwd.bn_act(tape, pre, l, &mut stats.ff[ff_t][l - 1], true);
        }
        trace.layer_energies.push(energies(tape, &r, l_count));
        record_cycle(tape, &mut trace, &mut cycle_masks, t, &r, &p);
    }

    let mask = mask_head(tape, bound, arch, r[l_count]);
    if record && trace.masks.len() == t_cycles + 1 {
        // final mask equals the last recorded one; keep handles aligned
        trace.masks[t_cycles] = mask_plane(tape.data(mask));
    }
    Ok(PcnetRun {
        mask,
        cycle_masks,
        r_top: r[l_count],
        trace,
    })
}

/// Mask head: transposed convolution to one channel plus bias, sigmoid
/// outside diagnostic mode.
fn mask_head<F: Scalar>(tape: &mut Tape<F>, bound: &BoundPcnet, arch: &PcnetArch, r_l: Var) -> Var {
    let up = tape.conv_transpose2d(r_l, bound.mask_w, arch.stride, arch.pad);
    let biased = tape.add_channel(up, bound.mask_b);
    if arch.linear_diagnostic {
        biased
    } else {
        tape.sigmoid(biased)
    }
}

fn l2_norm<F: Scalar>(x: &ArrayD<F>) -> f64 {
    x.iter().map(|v| v.to_f() * v.to_f()).sum::<f64>().sqrt()
}

fn energies<F: Scalar>(tape: &Tape<F>, r: &[Var], l_count: usize) -> Vec<f64> {
    (1..=l_count).map(|l| l2_norm(tape.data(r[l]))).collect()
}

fn mask_plane<F: Scalar>(data: &ArrayD<F>) -> Array2<F> {
    let sh = data.shape();
    let (h, w) = (sh[2], sh[3]);
    Array2::from_shape_fn((h, w), |(i, j)| data[[0, 0, i, j]])
}

/// Single-sample inference with frozen parameters and eval-mode
/// normalization. Returns the warped-grid mask and the per-cycle trace.
pub fn run_inference<F: Scalar>(
    smix: &WarpedSpectrogram<F>,
    feat_cf: &ndarray::Array3<F>,
    params: &PcnetParams<F>,
    t_cycles: usize,
) -> Result<(SeparationMask<F>, InferenceTrace<F>)> {
    let arch = &params.arch;
    let (rows, cols) = smix.values.dim();
    if rows != arch.input_side || cols != arch.input_side {
        return Err(Error::ShapeMismatch(format!(
            "mixture {}x{}, arch wants {0}x{0} with side {}",
            rows, cols, arch.input_side
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let smix_var = {
        let data = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, rows, cols]),
            smix.values.iter().cloned().collect(),
        )
        .unwrap();
        tape.constant(data)
    };
    let feat_var = {
        let (k, h, w) = feat_cf.dim();
        let data =
            ArrayD::from_shape_vec(IxDyn(&[1, k, h, w]), feat_cf.iter().cloned().collect()).unwrap();
        tape.constant(data)
    };
    let mut stats = params.stats.clone();
    let run = forward(
        &mut tape, &bound, arch, &mut stats, smix_var, feat_var, t_cycles, false, true,
    )?;
    let plane = mask_plane(tape.data(run.mask));
    Ok((
        SeparationMask {
            values: plane,
            kind: MaskKind::Predicted,
        },
        run.trace,
    ))
}

/// Convex feedback update `(1-b) r + b p`, the scalar core of the
/// feedback sweep.
pub fn convex_update<F: Scalar>(r: F, p: F, b: F) -> F {
    (F::one() - b) * r + b * p
}

/// Additive feedforward update `r + a e`, the scalar core of the
/// feedforward sweep.
pub fn feedforward_update<F: Scalar>(r: F, e: F, a: F) -> F {
    r + a * e
}

//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! The tape owns every intermediate value of a forward pass; `backward`
//! walks the tape in reverse and accumulates gradients for nodes that
//! require them. Convolution and transposed convolution are exact
//! adjoints of each other, which is what makes weight tying in the
//! separation network hold to machine precision.

use ndarray::{ArrayD, Ix2, IxDyn};
use rayon::prelude::*;

use crate::scalar::Scalar;

const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var, F),
    Sqrt(Var),
    LeakyRelu(Var, F),
    Sigmoid(Var),
    Detach(Var),
    Reshape(Var),
    /// x broadcast-multiplied by a per-channel vector (axis 1).
    MulChannel(Var, Var),
    /// x plus a per-channel bias (axis 1).
    AddChannel(Var, Var),
    Conv {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvT {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<F>,
        inv_std: Vec<F>,
        /// true when mean/inv_std were computed from this batch
        batch: bool,
    },
    MatMul(Var, Var),
    SelectRows(Var, Vec<usize>),
    SumAll(Var),
    MeanSpatial(Var),
    MeanGroup(Var, usize),
    MaxGroup(Var, usize, Vec<usize>),
    BceMean {
        pred: Var,
        target: ArrayD<F>,
        eps: F,
    },
    NegCosRows(Var, Var),
}

struct Node<F: Scalar> {
    data: ArrayD<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: ArrayD<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            data,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn data(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].data
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        let d = self.data(v);
        assert_eq!(d.len(), 1, "expected scalar node");
        *d.iter().next().unwrap()
    }

    // ---- node constructors -------------------------------------------------

    pub fn leaf(&mut self, data: ArrayD<F>, trainable: bool) -> Var {
        self.push(data, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, data: ArrayD<F>) -> Var {
        self.leaf(data, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let data = &self.nodes[a.0].data + &self.nodes[b.0].data;
        let rg = self.requires(a) || self.requires(b);
        self.push(data, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let data = &self.nodes[a.0].data - &self.nodes[b.0].data;
        let rg = self.requires(a) || self.requires(b);
        self.push(data, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let data = &self.nodes[a.0].data * &self.nodes[b.0].data;
        let rg = self.requires(a) || self.requires(b);
        self.push(data, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let data = &self.nodes[a.0].data / &self.nodes[b.0].data;
        let rg = self.requires(a) || self.requires(b);
        self.push(data, Op::Div(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.nodes[a.0].data.mapv(|x| x * c);
        let rg = self.requires(a);
        self.push(data, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let data = self.nodes[a.0].data.mapv(|x| x + c);
        let rg = self.requires(a);
        self.push(data, Op::AddScalar(a, c), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.mapv(|x| x.sqrt());
        let rg = self.requires(a);
        self.push(data, Op::Sqrt(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let data = self.nodes[a.0].data.mapv(|x| {
            if x >= F::zero() {
                x
            } else {
                x * slope
            }
        });
        let rg = self.requires(a);
        self.push(data, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.mapv(sigmoid_scalar);
        let rg = self.requires(a);
        self.push(data, Op::Sigmoid(a), rg)
    }

    /// Identity on values, blocks all gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.clone();
        self.push(data, Op::Detach(a), false)
    }

    /// View with a new shape of the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let data = self.nodes[a.0]
            .data
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count");
        let rg = self.requires(a);
        self.push(data, Op::Reshape(a), rg)
    }

    pub fn mul_channel(&mut self, x: Var, c: Var) -> Var {
        let (n, ch, rest) = split_channel_shape(self.nodes[x.0].data.shape());
        assert_eq!(self.nodes[c.0].data.len(), ch, "channel vector length");
        let xs = as_slice(&self.nodes[x.0].data);
        let cs = as_slice(&self.nodes[c.0].data);
        let mut out = vec![F::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..ch {
                let base = (ni * ch + ci) * rest;
                let cv = cs[ci];
                for r in 0..rest {
                    out[base + r] = xs[base + r] * cv;
                }
            }
        }
        let data = from_vec(self.nodes[x.0].data.shape(), out);
        let rg = self.requires(x) || self.requires(c);
        self.push(data, Op::MulChannel(x, c), rg)
    }

    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let (n, ch, rest) = split_channel_shape(self.nodes[x.0].data.shape());
        assert_eq!(self.nodes[b.0].data.len(), ch, "bias length");
        let xs = as_slice(&self.nodes[x.0].data);
        let bs = as_slice(&self.nodes[b.0].data);
        let mut out = vec![F::zero(); xs.len()];
        for ni in 0..n {
            for ci in 0..ch {
                let base = (ni * ch + ci) * rest;
                let bv = bs[ci];
                for r in 0..rest {
                    out[base + r] = xs[base + r] + bv;
                }
            }
        }
        let data = from_vec(self.nodes[x.0].data.shape(), out);
        let rg = self.requires(x) || self.requires(b);
        self.push(data, Op::AddChannel(x, b), rg)
    }

    /// 2-D convolution, NCHW input, `[c_out, c_in, k, k]` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let data = conv_fwd(&self.nodes[x.0].data, &self.nodes[w.0].data, stride, pad);
        let rg = self.requires(x) || self.requires(w);
        self.push(data, Op::Conv { x, w, stride, pad }, rg)
    }

    /// Transposed 2-D convolution: the exact adjoint of [`Tape::conv2d`]
    /// with the same `[c_out, c_in, k, k]` kernel. Maps a `c_out` input
    /// to a `c_in` output of side `(in - 1) * stride + k - 2 * pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let xs = self.nodes[x.0].data.shape();
        let k = self.nodes[w.0].data.shape()[2];
        let oh = (xs[2] - 1) * stride + k - 2 * pad;
        let ow = (xs[3] - 1) * stride + k - 2 * pad;
        let data = conv_bwd_x(&self.nodes[x.0].data, &self.nodes[w.0].data, stride, pad, oh, ow);
        let rg = self.requires(x) || self.requires(w);
        self.push(data, Op::ConvT { x, w, stride, pad }, rg)
    }

    /// Batch normalization using statistics of this batch. Returns the
    /// output node plus the per-channel (mean, variance) used, so callers
    /// can fold them into running statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, Vec<F>, Vec<F>) {
        let (mean, var) = channel_moments(&self.nodes[x.0].data);
        let inv_std: Vec<F> = var
            .iter()
            .map(|&v| F::one() / (v + F::from_f(BN_EPS)).sqrt())
            .collect();
        let out = bn_apply(
            &self.nodes[x.0].data,
            &mean,
            &inv_std,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
        );
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch: true,
            },
            rg,
        );
        (v, mean, var)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[F], var: &[F]) -> Var {
        let inv_std: Vec<F> = var
            .iter()
            .map(|&v| F::one() / (v + F::from_f(BN_EPS)).sqrt())
            .collect();
        let out = bn_apply(
            &self.nodes[x.0].data,
            mean,
            &inv_std,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
        );
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch: false,
            },
            rg,
        )
    }

    /// `[n, d] x [d, m]` matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = view2(&self.nodes[a.0].data);
        let bv = view2(&self.nodes[b.0].data);
        let data = av.dot(&bv).into_dyn();
        let rg = self.requires(a) || self.requires(b);
        self.push(data, Op::MatMul(a, b), rg)
    }

    /// Gather rows along axis 0.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xd = &self.nodes[x.0].data;
        let row = xd.len() / xd.shape()[0];
        let xs = as_slice(xd);
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            assert!(i < xd.shape()[0], "row index out of range");
            out.extend_from_slice(&xs[i * row..(i + 1) * row]);
        }
        let mut shape = xd.shape().to_vec();
        shape[0] = idx.len();
        let data = from_vec(&shape, out);
        let rg = self.requires(x);
        self.push(data, Op::SelectRows(x, idx.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.nodes[a.0].data.iter().copied().sum();
        let rg = self.requires(a);
        self.push(from_vec(&[1], vec![s]), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.sum_all(a);
        self.scale(s, F::one() / F::from_f(n as f64))
    }

    /// `[n, c, h, w] -> [n, c]` spatial average.
    pub fn mean_spatial(&mut self, a: Var) -> Var {
        let sh = self.nodes[a.0].data.shape().to_vec();
        assert_eq!(sh.len(), 4);
        let (n, c, rest) = (sh[0], sh[1], sh[2] * sh[3]);
        let xs = as_slice(&self.nodes[a.0].data);
        let inv = F::one() / F::from_f(rest as f64);
        let mut out = vec![F::zero(); n * c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * rest;
                let mut s = F::zero();
                for r in 0..rest {
                    s += xs[base + r];
                }
                out[ni * c + ci] = s * inv;
            }
        }
        let rg = self.requires(a);
        self.push(from_vec(&[n, c], out), Op::MeanSpatial(a), rg)
    }

    /// `[n*f, ...] -> [n, ...]` mean over groups of `f` consecutive rows.
    pub fn mean_group(&mut self, a: Var, f: usize) -> Var {
        let sh = self.nodes[a.0].data.shape().to_vec();
        assert!(sh[0] % f == 0, "group size must divide leading dim");
        let n = sh[0] / f;
        let row = self.nodes[a.0].data.len() / sh[0];
        let xs = as_slice(&self.nodes[a.0].data);
        let inv = F::one() / F::from_f(f as f64);
        let mut out = vec![F::zero(); n * row];
        for ni in 0..n {
            for fi in 0..f {
                let base = (ni * f + fi) * row;
                for r in 0..row {
                    out[ni * row + r] += xs[base + r];
                }
            }
            for r in 0..row {
                out[ni * row + r] *= inv;
            }
        }
        let mut shape = sh.clone();
        shape[0] = n;
        let rg = self.requires(a);
        self.push(from_vec(&shape, out), Op::MeanGroup(a, f), rg)
    }

    /// `[n*f, ...] -> [n, ...]` elementwise max over groups of `f` rows.
    pub fn max_group(&mut self, a: Var, f: usize) -> Var {
        let sh = self.nodes[a.0].data.shape().to_vec();
        assert!(sh[0] % f == 0, "group size must divide leading dim");
        let n = sh[0] / f;
        let row = self.nodes[a.0].data.len() / sh[0];
        let xs = as_slice(&self.nodes[a.0].data);
        let mut out = vec![F::neg_infinity(); n * row];
        let mut arg = vec![0usize; n * row];
        for ni in 0..n {
            for fi in 0..f {
                let base = (ni * f + fi) * row;
                for r in 0..row {
                    if xs[base + r] > out[ni * row + r] {
                        out[ni * row + r] = xs[base + r];
                        arg[ni * row + r] = base + r;
                    }
                }
            }
        }
        let mut shape = sh.clone();
        shape[0] = n;
        let rg = self.requires(a);
        self.push(from_vec(&shape, out), Op::MaxGroup(a, f, arg), rg)
    }

    /// Mean binary cross-entropy against a fixed target, with predictions
    /// clamped to `[eps, 1-eps]`.
    pub fn bce_mean(&mut self, pred: Var, target: ArrayD<F>, eps: F) -> Var {
        assert_eq!(
            self.nodes[pred.0].data.shape(),
            target.shape(),
            "bce shapes"
        );
        let ps = as_slice(&self.nodes[pred.0].data);
        let ts = as_slice(&target);
        let one = F::one();
        let mut s = F::zero();
        for (&p, &t) in ps.iter().zip(ts) {
            let pc = p.max(eps).min(one - eps);
            s -= t * pc.ln() + (one - t) * (one - pc).ln();
        }
        let m = s / F::from_f(ps.len() as f64);
        let rg = self.requires(pred);
        self.push(from_vec(&[1], vec![m]), Op::BceMean { pred, target, eps }, rg)
    }

    /// Row-wise negative cosine similarity between `[n, d]` inputs,
    /// output `[n]`. Rows must have nonzero norm.
    pub fn neg_cos_rows(&mut self, a: Var, b: Var) -> Var {
        let sa = self.nodes[a.0].data.shape().to_vec();
        let sb = self.nodes[b.0].data.shape().to_vec();
        assert_eq!(sa, sb, "neg_cos_rows shapes");
        assert_eq!(sa.len(), 2, "neg_cos_rows wants [n, d]");
        let (n, d) = (sa[0], sa[1]);
        let xa = as_slice(&self.nodes[a.0].data);
        let xb = as_slice(&self.nodes[b.0].data);
        let mut out = vec![F::zero(); n];
        for i in 0..n {
            let (ra, rb) = (&xa[i * d..(i + 1) * d], &xb[i * d..(i + 1) * d]);
            let na = ra.iter().map(|&v| v * v).sum::<F>().sqrt();
            let nb = rb.iter().map(|&v| v * v).sum::<F>().sqrt();
            assert!(
                na > F::zero() && nb > F::zero(),
                "neg_cos_rows: zero-norm row"
            );
            let dot: F = ra.iter().zip(rb).map(|(&u, &v)| u * v).sum();
            out[i] = -dot / (na * nb);
        }
        let rg = self.requires(a) || self.requires(b);
        self.push(from_vec(&[n], out), Op::NegCosRows(a, b), rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar loss node. Gradients accumulate into
    /// `self.grads`; a second call resets them first.
    pub fn backward(&mut self, loss: Var) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
        assert_eq!(self.nodes[loss.0].data.len(), 1, "loss must be scalar");
        self.grads[loss.0] = Some(from_vec(&[1], vec![F::one()]));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            self.step_backward(i, &gy);
            self.grads[i] = Some(gy);
        }
    }

    fn accumulate(&mut self, v: Var, g: ArrayD<F>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn step_backward(&mut self, i: usize, gy: &ArrayD<F>) {
        // the op is moved out so we can borrow `self` mutably for accumulation
        match std::mem::replace(&mut self.nodes[i].op, Op::Leaf) {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, gy.clone());
                self.accumulate(b, gy.clone());
                self.nodes[i].op = Op::Add(a, b);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, gy.clone());
                self.accumulate(b, gy.mapv(|v| -v));
                self.nodes[i].op = Op::Sub(a, b);
            }
            Op::Mul(a, b) => {
                let ga = gy * &self.nodes[b.0].data;
                let gb = gy * &self.nodes[a.0].data;
                self.accumulate(a, ga);
                self.accumulate(b, gb);
                self.nodes[i].op = Op::Mul(a, b);
            }
            Op::Div(a, b) => {
                let ga = gy / &self.nodes[b.0].data;
                let gb = {
                    let bd = &self.nodes[b.0].data;
                    let ad = &self.nodes[a.0].data;
                    -(gy * ad) / (bd * bd)
                };
                self.accumulate(a, ga);
                self.accumulate(b, gb);
                self.nodes[i].op = Op::Div(a, b);
            }
            Op::Scale(a, c) => {
                self.accumulate(a, gy.mapv(|v| v * c));
                self.nodes[i].op = Op::Scale(a, c);
            }
            Op::AddScalar(a, c) => {
                self.accumulate(a, gy.clone());
                self.nodes[i].op = Op::AddScalar(a, c);
            }
            Op::Sqrt(a) => {
                let two = F::from_f(2.0);
                let g = gy / &self.nodes[i].data.mapv(|v| v * two);
                self.accumulate(a, g);
                self.nodes[i].op = Op::Sqrt(a);
            }
            Op::LeakyRelu(a, slope) => {
                let xd = &self.nodes[a.0].data;
                let mut g = gy.clone();
                g.zip_mut_with(xd, |gv, &xv| {
                    if xv < F::zero() {
                        *gv = *gv * slope;
                    }
                });
                self.accumulate(a, g);
                self.nodes[i].op = Op::LeakyRelu(a, slope);
            }
            Op::Sigmoid(a) => {
                let yd = &self.nodes[i].data;
                let one = F::one();
                let mut g = gy.clone();
                g.zip_mut_with(yd, |gv, &yv| *gv = *gv * yv * (one - yv));
                self.accumulate(a, g);
                self.nodes[i].op = Op::Sigmoid(a);
            }
            Op::Detach(a) => {
                self.nodes[i].op = Op::Detach(a);
            }
            Op::Reshape(a) => {
                let target = self.nodes[a.0].data.raw_dim();
                let g = gy.clone().into_shape_with_order(target).unwrap();
                self.accumulate(a, g);
                self.nodes[i].op = Op::Reshape(a);
            }
            Op::MulChannel(x, c) => {
                let (n, ch, rest) = split_channel_shape(self.nodes[x.0].data.shape());
                let gys = as_slice(gy);
                let cs = as_slice(&self.nodes[c.0].data);
                let xs = as_slice(&self.nodes[x.0].data);
                let mut gx = vec![F::zero(); xs.len()];
                let mut gc = vec![F::zero(); ch];
                for ni in 0..n {
                    for ci in 0..ch {
                        let base = (ni * ch + ci) * rest;
                        let cv = cs[ci];
                        let mut s = F::zero();
                        for r in 0..rest {
                            gx[base + r] = gys[base + r] * cv;
                            s += gys[base + r] * xs[base + r];
                        }
                        gc[ci] += s;
                    }
                }
                self.accumulate(x, from_vec(self.nodes[x.0].data.shape(), gx));
                self.accumulate(c, from_vec(&[ch], gc));
                self.nodes[i].op = Op::MulChannel(x, c);
            }
            Op::AddChannel(x, b) => {
                let (n, ch, rest) = split_channel_shape(self.nodes[x.0].data.shape());
                let gys = as_slice(gy);
                let mut gb = vec![F::zero(); ch];
                for ni in 0..n {
                    for ci in 0..ch {
                        let base = (ni * ch + ci) * rest;
                        let mut s = F::zero();
                        for r in 0..rest {
                            s += gys[base + r];
                        }
                        gb[ci] += s;
                    }
                }
                self.accumulate(x, gy.clone());
                self.accumulate(b, from_vec(&[ch], gb));
                self.nodes[i].op = Op::AddChannel(x, b);
            }
            Op::Conv { x, w, stride, pad } => {
                if self.nodes[x.0].requires_grad {
                    let xsh = self.nodes[x.0].data.shape();
                    let (hh, ww) = (xsh[2], xsh[3]);
                    let gx = conv_bwd_x(gy, &self.nodes[w.0].data, stride, pad, hh, ww);
                    self.accumulate(x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let gw = conv_bwd_w(&self.nodes[x.0].data, gy, &kshape(&self.nodes[w.0].data), stride, pad);
                    self.accumulate(w, gw);
                }
                self.nodes[i].op = Op::Conv { x, w, stride, pad };
            }
            Op::ConvT { x, w, stride, pad } => {
                if self.nodes[x.0].requires_grad {
                    let gx = conv_fwd(gy, &self.nodes[w.0].data, stride, pad);
                    self.accumulate(x, gx);
                }
                if self.nodes[w.0].requires_grad {
                    let gw = conv_bwd_w(gy, &self.nodes[x.0].data, &kshape(&self.nodes[w.0].data), stride, pad);
                    self.accumulate(w, gw);
                }
                self.nodes[i].op = Op::ConvT { x, w, stride, pad };
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch,
            } => {
                let (n, ch, rest) = split_channel_shape(self.nodes[x.0].data.shape());
                let m = (n * rest) as f64;
                let gys = as_slice(gy);
                let xs = as_slice(&self.nodes[x.0].data);
                let gs = as_slice(&self.nodes[gamma.0].data);
                let mut gx = vec![F::zero(); xs.len()];
                let mut ggamma = vec![F::zero(); ch];
                let mut gbeta = vec![F::zero(); ch];
                for ci in 0..ch {
                    let mu = mean[ci];
                    let is = inv_std[ci];
                    let ga = gs[ci];
                    let mut sum_g = F::zero();
                    let mut sum_gx = F::zero();
                    for ni in 0..n {
                        let base = (ni * ch + ci) * rest;
                        for r in 0..rest {
                            let g = gys[base + r];
                            let xhat = (xs[base + r] - mu) * is;
                            sum_g += g;
                            sum_gx += g * xhat;
                        }
                    }
                    ggamma[ci] = sum_gx;
                    gbeta[ci] = sum_g;
                    if batch {
                        let inv_m = F::from_f(1.0 / m);
                        for ni in 0..n {
                            let base = (ni * ch + ci) * rest;
                            for r in 0..rest {
                                let g = gys[base + r];
                                let xhat = (xs[base + r] - mu) * is;
                                gx[base + r] =
                                    ga * is * (g - inv_m * (sum_g + xhat * sum_gx));
                            }
                        }
                    } else {
                        for ni in 0..n {
                            let base = (ni * ch + ci) * rest;
                            for r in 0..rest {
                                gx[base + r] = gys[base + r] * ga * is;
                            }
                        }
                    }
                }
                self.accumulate(x, from_vec(self.nodes[x.0].data.shape(), gx));
                self.accumulate(gamma, from_vec(&[ch], ggamma));
                self.accumulate(beta, from_vec(&[ch], gbeta));
                self.nodes[i].op = Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                    batch,
                };
            }
            Op::MatMul(a, b) => {
                let gyv = view2(gy);
                let av = view2(&self.nodes[a.0].data);
                let bv = view2(&self.nodes[b.0].data);
                let ga = gyv.dot(&bv.t()).into_dyn();
                let gb = av.t().dot(&gyv).into_dyn();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
                self.nodes[i].op = Op::MatMul(a, b);
            }
            Op::SelectRows(x, idx) => {
                let row = self.nodes[x.0].data.len() / self.nodes[x.0].data.shape()[0];
                let gys = as_slice(gy);
                let mut gx = vec![F::zero(); self.nodes[x.0].data.len()];
                for (bi, &ri) in idx.iter().enumerate() {
                    for r in 0..row {
                        gx[ri * row + r] += gys[bi * row + r];
                    }
                }
                self.accumulate(x, from_vec(self.nodes[x.0].data.shape(), gx));
                self.nodes[i].op = Op::SelectRows(x, idx);
            }
            Op::SumAll(a) => {
                let g = self.scalar_grad(gy);
                let sh = self.nodes[a.0].data.shape().to_vec();
                self.accumulate(a, ArrayD::from_elem(IxDyn(&sh), g));
                self.nodes[i].op = Op::SumAll(a);
            }
            Op::MeanSpatial(a) => {
                let sh = self.nodes[a.0].data.shape().to_vec();
                let (n, c, rest) = (sh[0], sh[1], sh[2] * sh[3]);
                let inv = F::one() / F::from_f(rest as f64);
                let gys = as_slice(gy);
                let mut gx = vec![F::zero(); n * c * rest];
                for ni in 0..n {
                    for ci in 0..c {
                        let g = gys[ni * c + ci] * inv;
                        let base = (ni * c + ci) * rest;
                        for r in 0..rest {
                            gx[base + r] = g;
                        }
                    }
                }
                self.accumulate(a, from_vec(&sh, gx));
                self.nodes[i].op = Op::MeanSpatial(a);
            }
            Op::MeanGroup(a, f) => {
                let sh = self.nodes[a.0].data.shape().to_vec();
                let n = sh[0] / f;
                let row = self.nodes[a.0].data.len() / sh[0];
                let inv = F::one() / F::from_f(f as f64);
                let gys = as_slice(gy);
                let mut gx = vec![F::zero(); self.nodes[a.0].data.len()];
                for ni in 0..n {
                    for fi in 0..f {
                        let base = (ni * f + fi) * row;
                        for r in 0..row {
                            gx[base + r] = gys[ni * row + r] * inv;
                        }
                    }
                }
                self.accumulate(a, from_vec(&sh, gx));
                self.nodes[i].op = Op::MeanGroup(a, f);
            }
            Op::MaxGroup(a, f, arg) => {
                let sh = self.nodes[a.0].data.shape().to_vec();
                let gys = as_slice(gy);
                let mut gx = vec![F::zero(); self.nodes[a.0].data.len()];
                for (oi, &src) in arg.iter().enumerate() {
                    gx[src] += gys[oi];
                }
                self.accumulate(a, from_vec(&sh, gx));
                self.nodes[i].op = Op::MaxGroup(a, f, arg);
            }
            Op::BceMean { pred, target, eps } => {
                let g = self.scalar_grad(gy);
                let ps = as_slice(&self.nodes[pred.0].data);
                let ts = as_slice(&target);
                let one = F::one();
                let inv_n = F::one() / F::from_f(ps.len() as f64);
                let mut gp = vec![F::zero(); ps.len()];
                for ((gpv, &p), &t) in gp.iter_mut().zip(ps).zip(ts) {
                    if p > eps && p < one - eps {
                        *gpv = g * inv_n * (-t / p + (one - t) / (one - p));
                    }
                }
                self.accumulate(pred, from_vec(self.nodes[pred.0].data.shape(), gp));
                self.nodes[i].op = Op::BceMean { pred, target, eps };
            }
            Op::NegCosRows(a, b) => {
                let sh = self.nodes[a.0].data.shape().to_vec();
                let (n, d) = (sh[0], sh[1]);
                let xa = as_slice(&self.nodes[a.0].data).to_vec();
                let xb = as_slice(&self.nodes[b.0].data).to_vec();
                let ys = as_slice(&self.nodes[i].data).to_vec();
                let gys = as_slice(gy);
                let mut ga = vec![F::zero(); n * d];
                let mut gb = vec![F::zero(); n * d];
                for r in 0..n {
                    let (ra, rb) = (&xa[r * d..(r + 1) * d], &xb[r * d..(r + 1) * d]);
                    let na = ra.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let nb = rb.iter().map(|&v| v * v).sum::<F>().sqrt();
                    let (g, y) = (gys[r], ys[r]);
                    // y = -<a,b>/(|a||b|); dy/da = -b/(|a||b|) - y a/|a|^2
                    for k in 0..d {
                        ga[r * d + k] = g * (-rb[k] / (na * nb) - y * ra[k] / (na * na));
                        gb[r * d + k] = g * (-ra[k] / (na * nb) - y * rb[k] / (nb * nb));
                    }
                }
                self.accumulate(a, from_vec(&sh, ga));
                self.accumulate(b, from_vec(&sh, gb));
                self.nodes[i].op = Op::NegCosRows(a, b);
            }
        }
    }

    fn scalar_grad(&self, gy: &ArrayD<F>) -> F {
        assert_eq!(gy.len(), 1);
        *gy.iter().next().unwrap()
    }
}

fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn as_slice<F: Scalar>(a: &ArrayD<F>) -> &[F] {
    a.as_slice().expect("standard layout expected")
}

fn from_vec<F: Scalar>(shape: &[usize], v: Vec<F>) -> ArrayD<F> {
    ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape/data mismatch")
}

fn view2<F: Scalar>(a: &ArrayD<F>) -> ndarray::ArrayView2<'_, F> {
    a.view().into_dimensionality::<Ix2>().expect("2-d expected")
}

fn split_channel_shape(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "need at least [n, c] shape");
    let rest: usize = shape[2..].iter().product();
    (shape[0], shape[1], rest.max(1))
}

fn kshape<F: Scalar>(w: &ArrayD<F>) -> Vec<usize> {
    w.shape().to_vec()
}

// ---- convolution kernels ---------------------------------------------------
//
// All three kernels lower to an im2col buffer plus one matrix product per
// image, so the heavy lifting runs through the gemm in `matrixmultiply`.

struct ConvGeom {
    cin: usize,
    h: usize,
    wd: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// Scatter one image into a `[cin*k*k, ho*wo]` patch matrix. Out-of-range
/// taps stay zero, which encodes the padding.
fn im2col<F: Scalar>(xs: &[F], g: &ConvGeom) -> ndarray::Array2<F> {
    let mut col = ndarray::Array2::<F>::zeros((g.cin * g.k * g.k, g.ho * g.wo));
    let cs = col.as_slice_mut().expect("fresh array is contiguous");
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let rbase = ((ci * g.k + kh) * g.k + kw) * g.ho * g.wo;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let xrow = ci * g.h * g.wd + ih as usize * g.wd;
                    let crow = rbase + oh * g.wo;
                    let iw0 = kw as isize - g.pad as isize;
                    for ow in 0..g.wo {
                        let iw = iw0 + (ow * g.stride) as isize;
                        if iw >= 0 && iw < g.wd as isize {
                            cs[crow + ow] = xs[xrow + iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: accumulate a patch matrix back into an image.
fn col2im<F: Scalar>(cs: &[F], on: &mut [F], g: &ConvGeom) {
    for ci in 0..g.cin {
        for kh in 0..g.k {
            for kw in 0..g.k {
                let rbase = ((ci * g.k + kh) * g.k + kw) * g.ho * g.wo;
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + kh) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let xrow = ci * g.h * g.wd + ih as usize * g.wd;
                    let crow = rbase + oh * g.wo;
                    let iw0 = kw as isize - g.pad as isize;
                    for ow in 0..g.wo {
                        let iw = iw0 + (ow * g.stride) as isize;
                        if iw >= 0 && iw < g.wd as isize {
                            on[xrow + iw as usize] += cs[crow + ow];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [n, c_in, h, w]`, `w: [c_out, c_in, k, k]` -> `[n, c_out, ho, wo]`.
pub fn conv_fwd<F: Scalar>(x: &ArrayD<F>, w: &ArrayD<F>, stride: usize, pad: usize) -> ArrayD<F> {
    let (n, cin, h, wd) = shape4(x);
    let (cout, cin2, k, k2) = shape4(w);
    assert_eq!(cin, cin2, "conv channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "kernel too large");
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let g = ConvGeom { cin, h, wd, k, stride, pad, ho, wo };
    let xs = as_slice(x);
    let ws = as_slice(w);
    let wmat = ndarray::ArrayView2::from_shape((cout, cin * k * k), ws).expect("kernel layout");
    let mut out = vec![F::zero(); n * cout * ho * wo];
    out.par_chunks_mut(cout * ho * wo)
        .enumerate()
        .for_each(|(ni, on)| {
            let col = im2col(&xs[ni * cin * h * wd..(ni + 1) * cin * h * wd], &g);
            let mut ov = ndarray::ArrayViewMut2::from_shape((cout, ho * wo), on)
                .expect("output layout");
            ndarray::linalg::general_mat_mul(F::one(), &wmat, &col.view(), F::zero(), &mut ov);
        });
    from_vec(&[n, cout, ho, wo], out)
}

/// Adjoint of [`conv_fwd`] in its first argument:
/// `y: [n, c_out, ho, wo]`, `w: [c_out, c_in, k, k]` -> `[n, c_in, h, w]`.
/// The spatial output size is passed explicitly because strided
/// convolutions do not determine it uniquely.
pub fn conv_bwd_x<F: Scalar>(
    y: &ArrayD<F>,
    w: &ArrayD<F>,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> ArrayD<F> {
    let (n, cout, ho, wo) = shape4(y);
    let (cout2, cin, k, _) = shape4(w);
    assert_eq!(cout, cout2, "conv channel mismatch");
    assert_eq!((h + 2 * pad - k) / stride + 1, ho, "incompatible out height");
    assert_eq!((wd + 2 * pad - k) / stride + 1, wo, "incompatible out width");
    let g = ConvGeom { cin, h, wd, k, stride, pad, ho, wo };
    let ys = as_slice(y);
    let ws = as_slice(w);
    let wmat = ndarray::ArrayView2::from_shape((cout, cin * k * k), ws).expect("kernel layout");
    let mut out = vec![F::zero(); n * cin * h * wd];
    out.par_chunks_mut(cin * h * wd)
        .enumerate()
        .for_each(|(ni, on)| {
            let yv = ndarray::ArrayView2::from_shape(
                (cout, ho * wo),
                &ys[ni * cout * ho * wo..(ni + 1) * cout * ho * wo],
            )
            .expect("input layout");
            let col = wmat.t().dot(&yv);
            col2im(col.as_slice().expect("gemm output is contiguous"), on, &g);
        });
    from_vec(&[n, cin, h, wd], out)
}

/// Kernel gradient of [`conv_fwd`]: `x: [n, c_in, h, w]`,
/// `gy: [n, c_out, ho, wo]` -> `[c_out, c_in, k, k]`.
pub fn conv_bwd_w<F: Scalar>(
    x: &ArrayD<F>,
    gy: &ArrayD<F>,
    wshape: &[usize],
    stride: usize,
    pad: usize,
) -> ArrayD<F> {
    let (n, cin, h, wd) = shape4(x);
    let (nn, cout, ho, wo) = shape4(gy);
    assert_eq!(n, nn, "batch mismatch");
    let (cout2, cin2, k) = (wshape[0], wshape[1], wshape[2]);
    assert_eq!(cout, cout2);
    assert_eq!(cin, cin2);
    let (ho2, wo2) = (
        (h + 2 * pad - k) / stride + 1,
        (wd + 2 * pad - k) / stride + 1,
    );
    assert_eq!((ho2, wo2), (ho, wo), "incompatible gradient size");
    let g = ConvGeom { cin, h, wd, k, stride, pad, ho, wo };
    let xs = as_slice(x);
    let gys = as_slice(gy);
    let mut gw = ndarray::Array2::<F>::zeros((cout, cin * k * k));
    for ni in 0..n {
        let col = im2col(&xs[ni * cin * h * wd..(ni + 1) * cin * h * wd], &g);
        let yv = ndarray::ArrayView2::from_shape(
            (cout, ho * wo),
            &gys[ni * cout * ho * wo..(ni + 1) * cout * ho * wo],
        )
        .expect("gradient layout");
        ndarray::linalg::general_mat_mul(F::one(), &yv, &col.t(), F::one(), &mut gw);
    }
    from_vec(wshape, gw.into_raw_vec_and_offset().0)
}

fn shape4<F: Scalar>(a: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

/// Per-channel mean and biased variance over all axes except axis 1.
pub fn channel_moments<F: Scalar>(x: &ArrayD<F>) -> (Vec<F>, Vec<F>) {
    let (n, ch, rest) = split_channel_shape(x.shape());
    let xs = as_slice(x);
    let m = F::from_f((n * rest) as f64);
    let mut mean = vec![F::zero(); ch];
    let mut var = vec![F::zero(); ch];
    for ci in 0..ch {
        let mut s = F::zero();
        for ni in 0..n {
            let base = (ni * ch + ci) * rest;
            for r in 0..rest {
                s += xs[base + r];
            }
        }
        mean[ci] = s / m;
    }
    for ci in 0..ch {
        let mu = mean[ci];
        let mut s = F::zero();
        for ni in 0..n {
            let base = (ni * ch + ci) * rest;
            for r in 0..rest {
                let d = xs[base + r] - mu;
                s += d * d;
            }
        }
        var[ci] = s / m;
    }
    (mean, var)
}

fn bn_apply<F: Scalar>(
    x: &ArrayD<F>,
    mean: &[F],
    inv_std: &[F],
    gamma: &ArrayD<F>,
    beta: &ArrayD<F>,
) -> ArrayD<F> {
    let (n, ch, rest) = split_channel_shape(x.shape());
    let xs = as_slice(x);
    let gs = as_slice(gamma);
    let bs = as_slice(beta);
    let mut out = vec![F::zero(); xs.len()];
    for ni in 0..n {
        for ci in 0..ch {
            let base = (ni * ch + ci) * rest;
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gs[ci], bs[ci]);
            for r in 0..rest {
                out[base + r] = ga * (xs[base + r] - mu) * is + be;
            }
        }
    }
    from_vec(x.shape(), out)
}

//! Versioned checkpoint container: architecture, every parameter
//! tensor, normalization statistics, and the training seed, with a
//! value-identical save/load round trip.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::model::{Guidance, Model};
use crate::pcnet::{NormStats, PcnetParams, Running};
use crate::scalar::Scalar;
use crate::training::RcopHeads;
use crate::vision::{ClassTable, VisionNet};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One parameter tensor, stored at full f64 precision with its
/// optimizer group label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub group: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    pub fn from_array<F: Scalar>(group: &str, a: &ArrayD<F>) -> Self {
        TensorData {
            group: group.to_string(),
            shape: a.shape().to_vec(),
            values: a.iter().map(|v| v.to_f()).collect(),
        }
    }

    pub fn to_array<F: Scalar>(&self) -> Result<ArrayD<F>> {
        let n: usize = self.shape.iter().product();
        if n != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}': shape {:?} does not hold {} values",
                self.group,
                self.shape,
                self.values.len()
            )));
        }
        Ok(ArrayD::from_shape_vec(
            IxDyn(&self.shape),
            self.values.iter().map(|&v| F::from_f(v)).collect(),
        )
        .unwrap())
    }
}

/// Serialized RCoP head parameters plus their dims.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RcopData {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub pred_hidden: usize,
    pub tensors: Vec<TensorData>,
}

/// The on-disk container. Tensors are listed in each component's
/// `visit` order, which is a stable part of the format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Seed of the training stage that produced this checkpoint.
    pub seed: u64,
    /// Sources per mixture the latest stage trained with.
    pub n_sources: usize,
    pub guidance: Guidance,
    pub data_cfg: DataConfig,
    pub freeze_trunk: bool,
    pub pcnet: Vec<TensorData>,
    pub stats: NormStats<f64>,
    pub vision: Vec<TensorData>,
    pub table: Vec<TensorData>,
    pub rcop: Option<RcopData>,
}

fn running_to_f64<F: Scalar>(r: &Running<F>) -> Running<f64> {
    Running {
        mean: r.mean.iter().map(|v| v.to_f()).collect(),
        var: r.var.iter().map(|v| v.to_f()).collect(),
    }
}

fn running_from_f64<F: Scalar>(r: &Running<f64>) -> Running<F> {
    Running {
        mean: r.mean.iter().map(|&v| F::from_f(v)).collect(),
        var: r.var.iter().map(|&v| F::from_f(v)).collect(),
    }
}

fn stats_to_f64<F: Scalar>(s: &NormStats<F>) -> NormStats<f64> {
    NormStats {
        capacity: s.capacity,
        input: running_to_f64(&s.input),
        init: s.init.iter().map(running_to_f64).collect(),
        ff: s.ff.iter().map(|t| t.iter().map(running_to_f64).collect()).collect(),
        fb: s.fb.iter().map(|t| t.iter().map(running_to_f64).collect()).collect(),
    }
}

fn stats_from_f64<F: Scalar>(s: &NormStats<f64>) -> NormStats<F> {
    NormStats {
        capacity: s.capacity,
        input: running_from_f64(&s.input),
        init: s.init.iter().map(running_from_f64).collect(),
        ff: s.ff.iter().map(|t| t.iter().map(running_from_f64).collect()).collect(),
        fb: s.fb.iter().map(|t| t.iter().map(running_from_f64).collect()).collect(),
    }
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(
        model: &Model<F>,
        heads: Option<&RcopHeads<F>>,
        seed: u64,
        n_sources: usize,
    ) -> Self {
        let mut pcnet = Vec::new();
        model
            .pcnet
            .visit(|g, p| pcnet.push(TensorData::from_array(g, p)));
        let mut vision = Vec::new();
        model
            .vision
            .visit(|g, p| vision.push(TensorData::from_array(g, p)));
        let mut table = Vec::new();
        {
            let rows = model.table.rows.clone().into_dyn();
            table.push(TensorData::from_array("class_table", &rows));
        }
        let rcop = heads.map(|h| {
            let mut tensors = Vec::new();
            h.visit(|g, p| tensors.push(TensorData::from_array(g, p)));
            RcopData {
                in_dim: h.in_dim,
                hidden: h.hidden,
                out_dim: h.out_dim,
                pred_hidden: h.pred_hidden,
                tensors,
            }
        });
        Checkpoint {
            version: CHECKPOINT_VERSION,
            seed,
            n_sources,
            guidance: model.guidance,
            data_cfg: model.data_cfg.clone(),
            freeze_trunk: model.vision.freeze_trunk,
            pcnet,
            stats: stats_to_f64(&model.pcnet.stats),
            vision,
            table,
            rcop,
        }
    }

    pub fn to_model<F: Scalar>(&self) -> Result<(Model<F>, Option<RcopHeads<F>>)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                self.version, CHECKPOINT_VERSION
            )));
        }
        self.data_cfg.validate()?;
        let mut pcnet = PcnetParams::init(self.pcnet_arch()?, 0)?;
        restore(&mut pcnet, &self.pcnet, "separation net", |p, f| {
            p.visit_mut(f)
        })?;
        pcnet.stats = stats_from_f64(&self.stats);
        let mut vision = VisionNet::init(self.data_cfg.vision.clone(), 0)?;
        restore(&mut vision, &self.vision, "vision net", |v, f| {
            v.visit_mut(f)
        })?;
        vision.freeze_trunk = self.freeze_trunk;
        let mut table =
            ClassTable::orthogonal_init(self.data_cfg.vision.clone(), self.data_cfg.num_classes, 0)?;
        restore(&mut table, &self.table, "class table", |t, f| {
            t.visit_mut(f)
        })?;
        let heads = match &self.rcop {
            None => None,
            Some(rc) => {
                let mut h = RcopHeads::init_dims(
                    rc.in_dim,
                    rc.hidden,
                    rc.out_dim,
                    rc.pred_hidden,
                    0,
                );
                restore(&mut h, &rc.tensors, "rcop heads", |h, f| h.visit_mut(f))?;
                Some(h)
            }
        };
        let model = Model {
            data_cfg: self.data_cfg.clone(),
            pcnet,
            vision,
            table,
            guidance: self.guidance,
        };
        Ok((model, heads))
    }

    fn pcnet_arch(&self) -> Result<crate::pcnet::PcnetArch> {
        // the desk and reference architectures are both determined by
        // the warped-grid side; kernel tensor count disambiguates tying
        let mut arch = if self.data_cfg.spec.warp_bins == 256 {
            crate::pcnet::PcnetArch::reference()
        } else {
            crate::pcnet::PcnetArch::desk()
        };
        let kernel_count = self
            .pcnet
            .iter()
            .filter(|t| t.group == "sep_kernel")
            .count();
        arch.untie_weights = kernel_count == 2 * (arch.layers + 1);
        Ok(arch)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        // write-then-rename so an abort never leaves a partial file
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&json)?)
    }
}

/// Overwrite a component's tensors from a checkpoint list, checking
/// count, group labels, and shapes.
fn restore<T, F: Scalar>(
    target: &mut T,
    tensors: &[TensorData],
    what: &str,
    visit: impl Fn(&mut T, &mut dyn FnMut(&'static str, &mut ArrayD<F>)),
) -> Result<()> {
    let mut idx = 0;
    let mut err: Option<Error> = None;
    visit(target, &mut |group, p| {
        if err.is_some() {
            return;
        }
        let Some(t) = tensors.get(idx) else {
            err = Some(Error::Checkpoint(format!(
                "{what}: checkpoint holds {} tensors, model wants more",
                tensors.len()
            )));
            return;
        };
        if t.group != group || t.shape != p.shape() {
            err = Some(Error::Checkpoint(format!(
                "{what} tensor {idx}: checkpoint has {} {:?}, model wants {} {:?}",
                t.group,
                t.shape,
                group,
                p.shape()
            )));
            return;
        }
        match t.to_array::<F>() {
            Ok(a) => *p = a,
            Err(e) => err = Some(e),
        }
        idx += 1;
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{what}: {} tensors restored, checkpoint holds {}",
            idx,
            tensors.len()
        )));
    }
    Ok(())
}

/// Save a model (plus optional RCoP heads) to `path`.
pub fn save_model<F: Scalar>(
    model: &Model<F>,
    heads: Option<&RcopHeads<F>>,
    seed: u64,
    n_sources: usize,
    path: &Path,
) -> Result<()> {
    Checkpoint::from_model(model, heads, seed, n_sources).save(path)
}

/// Load a model (plus RCoP heads when present) from `path`.
pub fn load_model<F: Scalar>(path: &Path) -> Result<(Model<F>, Option<RcopHeads<F>>, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, heads) = ckpt.to_model()?;
    Ok((model, heads, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pcnet::PcnetArch;
    use crate::vision::VisionConfig;

    fn sample_model() -> Model<f64> {
        let cfg = DataConfig::desk();
        Model {
            data_cfg: cfg.clone(),
            pcnet: PcnetParams::init(PcnetArch::desk(), 5).unwrap(),
            vision: VisionNet::init(VisionConfig::desk(), 5).unwrap(),
            table: ClassTable::orthogonal_init(VisionConfig::desk(), cfg.num_classes, 5).unwrap(),
            guidance: Guidance::Class,
        }
    }

    fn assert_models_identical(a: &Model<f64>, b: &Model<f64>) {
        let mut lhs = Vec::new();
        a.pcnet.visit(|_, p| lhs.push(p.clone()));
        a.vision.visit(|_, p| lhs.push(p.clone()));
        let mut i = 0;
        b.pcnet.visit(|_, p| {
            assert_eq!(p, &lhs[i]);
            i += 1;
        });
        b.vision.visit(|_, p| {
            assert_eq!(p, &lhs[i]);
            i += 1;
        });
        assert_eq!(a.table.rows, b.table.rows);
        assert_eq!(
            format!("{:?}", a.pcnet.stats),
            format!("{:?}", b.pcnet.stats)
        );
    }

    #[test]
    fn round_trip_is_value_identical() {
        let mut model = sample_model();
        // dirty the running stats so the round trip covers them
        model.pcnet.stats.input.mean[0] = 0.123456789012345678;
        model.pcnet.stats.ff[1][2].var[7] = 3.6099426546593922;
        let heads = RcopHeads::init(32, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, Some(&heads), 42, 2, &path).unwrap();
        let (loaded, loaded_heads, ckpt) = load_model::<f64>(&path).unwrap();
        assert_eq!(ckpt.version, CHECKPOINT_VERSION);
        assert_eq!(ckpt.seed, 42);
        assert_eq!(ckpt.n_sources, 2);
        assert_models_identical(&model, &loaded);
        let lh = loaded_heads.unwrap();
        let mut lhs = Vec::new();
        heads.visit(|_, p| lhs.push(p.clone()));
        let mut i = 0;
        lh.visit(|_, p| {
            assert_eq!(p, &lhs[i]);
            i += 1;
        });
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = sample_model();
        let mut ckpt = Checkpoint::from_model(&model, None, 0, 2);
        ckpt.pcnet[0].shape[0] += 1;
        let extra = ckpt.pcnet[0].values.len() / 16;
        ckpt.pcnet[0].values.extend(std::iter::repeat(0.0).take(extra));
        assert!(ckpt.to_model::<f64>().is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = sample_model();
        let mut ckpt = Checkpoint::from_model(&model, None, 0, 2);
        ckpt.version = 99;
        assert!(ckpt.to_model::<f64>().is_err());
    }

    #[test]
    fn untied_kernels_survive_the_round_trip() {
        let mut arch = PcnetArch::desk();
        arch.untie_weights = true;
        let cfg = DataConfig::desk();
        let model = Model::<f64> {
            data_cfg: cfg.clone(),
            pcnet: PcnetParams::init(arch, 3).unwrap(),
            vision: VisionNet::init(VisionConfig::desk(), 3).unwrap(),
            table: ClassTable::orthogonal_init(VisionConfig::desk(), cfg.num_classes, 3).unwrap(),
            guidance: Guidance::Frames,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_model(&model, None, 7, 3, &path).unwrap();
        let (loaded, heads, _) = load_model::<f64>(&path).unwrap();
        assert!(heads.is_none());
        assert!(loaded.pcnet.kernels_up.is_some());
        assert_eq!(loaded.guidance, Guidance::Frames);
        assert_models_identical(&model, &loaded);
    }
}

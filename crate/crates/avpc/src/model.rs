//! Model bundle (separation network plus guidance providers) and
//! mixture assembly shared by training and evaluation.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::{synth_clip, ClipRecord, DataConfig};
use crate::dsp::{
    ground_truth_mask, magnitude, mix_waveforms, stft, warp_log_frequency, AudioClip,
    ComplexSpectrogram, SeparationMask, WarpedSpectrogram,
};
use crate::error::Result;
use crate::pcnet::PcnetParams;
use crate::scalar::Scalar;
use crate::vision::{encode_class, ClassTable, FrameStack, VisionNet};

/// Which path produces the guidance feature f_n.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    /// Learnable per-class embedding table.
    Class,
    /// Frame encoder over the clip's video frames.
    Frames,
}

/// Everything needed to separate a mixture.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub data_cfg: DataConfig,
    pub pcnet: PcnetParams<F>,
    pub vision: VisionNet<F>,
    pub table: ClassTable<F>,
    pub guidance: Guidance,
}

impl<F: Scalar> Model<F> {
    /// Guidance feature for one source, channel-first `[K, hh, ww]`.
    pub fn guidance_feature(
        &self,
        record: &ClipRecord,
        frames: &FrameStack<F>,
    ) -> Result<Array3<F>> {
        match self.guidance {
            Guidance::Class => Ok(encode_class(record.class_id, &self.table)?.channel_first()),
            Guidance::Frames => Ok(self.vision.encode_frames(frames)?.channel_first()),
        }
    }
}

/// One assembled training/evaluation example: N sources, their mean
/// mixture, and everything derived from it.
#[derive(Debug, Clone)]
pub struct MixtureExample<F: Scalar> {
    pub records: Vec<ClipRecord>,
    pub sources: Vec<AudioClip<F>>,
    pub frames: Vec<FrameStack<F>>,
    pub mixture: AudioClip<F>,
    pub mix_complex: ComplexSpectrogram<F>,
    pub mix_warped: WarpedSpectrogram<F>,
    pub source_warped: Vec<WarpedSpectrogram<F>>,
    pub gt_masks: Vec<SeparationMask<F>>,
}

/// Synthesize the clips behind `records`, mix them, and compute warped
/// magnitudes and dominance masks.
pub fn build_mixture<F: Scalar>(
    records: &[&ClipRecord],
    cfg: &DataConfig,
) -> Result<MixtureExample<F>> {
    let mut sources = Vec::with_capacity(records.len());
    let mut frames = Vec::with_capacity(records.len());
    for r in records {
        let (audio, video) = synth_clip::<F>(r.class_id, r.seed, cfg)?;
        sources.push(audio);
        frames.push(video);
    }
    let mixture = mix_waveforms(&sources)?;
    let mix_complex = stft(&mixture, &cfg.spec)?;
    let mix_warped = warp_log_frequency(&magnitude(&mix_complex), &cfg.spec)?;
    let mut source_warped = Vec::with_capacity(records.len());
    let mut gt_masks = Vec::with_capacity(records.len());
    for s in &sources {
        let spec = stft(s, &cfg.spec)?;
        let warped = warp_log_frequency(&magnitude(&spec), &cfg.spec)?;
        gt_masks.push(ground_truth_mask(&warped, &mix_warped)?);
        source_warped.push(warped);
    }
    Ok(MixtureExample {
        records: records.iter().map(|r| (*r).clone()).collect(),
        sources,
        frames,
        mixture,
        mix_complex,
        mix_warped,
        source_warped,
        gt_masks,
    })
}

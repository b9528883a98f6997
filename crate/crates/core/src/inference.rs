//! Batched prediction over image sets, prediction files and overlap scores.

use std::path::Path;

use candle_core::Device;
use image::GrayImage;
use ndarray::{Array2, Array3};

use crate::checkpoint::Checkpoint;
use crate::data::{image_batch, DatasetSample, Normalization};
use crate::error::{shape_err, Error, Result};
use crate::networks::CamoDiffusion;
use crate::nn::VarStore;
use crate::rng::mix_seed;
use crate::sampler::{predict_batch, PredictionHistory, SampleMode};
use crate::schedule::NoiseSchedule;

/// Result for one input image.
#[derive(Debug, Clone)]
pub struct SamplePrediction {
    pub id: String,
    /// Consensus over every step of every chain.
    pub mask: Array2<f64>,
    /// Last-step estimate of the first chain.
    pub final_x0: Array2<f64>,
    pub histories: Vec<PredictionHistory>,
}

/// Per-image sampling seed; depends on the stem, not on batch position.
pub fn image_seed(seed: u64, id: &str) -> u64 {
    mix_seed(seed, id)
}

#[derive(Debug, Clone)]
pub struct Predictor {
    model: CamoDiffusion,
    schedule: NoiseSchedule,
    norm: Normalization,
    resolution: usize,
    device: Device,
}

impl Predictor {
    pub fn new(model: CamoDiffusion, schedule: NoiseSchedule, norm: Normalization, resolution: usize, device: Device) -> Self {
        Self { model, schedule, norm, resolution, device }
    }

    /// Model, normalization and resolution from a checkpoint. `steps`
    /// overrides the number of reverse steps of the stored schedule.
    pub fn from_checkpoint(ckpt: &Checkpoint, steps: Option<usize>, device: Device) -> Result<Self> {
        let cfg = &ckpt.config;
        let store = VarStore::new(0, device.clone());
        let mut model_cfg = cfg.model.clone();
        model_cfg.backbone_weights = None;
        let model = CamoDiffusion::new(&store, &model_cfg)?;
        store.load(&ckpt.params)?;
        let schedule = cfg.schedule.build()?.with_steps(steps.unwrap_or_else(|| cfg.sampling_steps()))?;
        let resolution = match ckpt.state.phase {
            crate::checkpoint::Phase::BaseRes => cfg.data.resolution,
            crate::checkpoint::Phase::FinetuneRes => cfg.data.finetune_resolution,
        };
        Ok(Self::new(model, schedule, cfg.data.normalization.clone(), resolution, device))
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    /// Same model with a different number of reverse steps.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut p = self.clone();
        p.schedule = self.schedule.with_steps(steps)?;
        Ok(p)
    }

    /// Predicts `(3, H, W)` images in `[0, 1]`; every image must be at the
    /// model resolution.
    pub fn predict_images(&self, items: &[(String, Array3<f32>)], mode: SampleMode, seed: u64, batch_size: usize) -> Result<Vec<SamplePrediction>> {
        let samples: Vec<DatasetSample> = items
            .iter()
            .map(|(id, image)| {
                let (_, h, w) = image.dim();
                DatasetSample { id: id.clone(), image: image.clone(), mask: Array2::from_elem((h, w), -1.0) }
            })
            .collect();
        self.predict(&samples, mode, seed, batch_size)
    }

    /// Predicts the masks of `samples` (their masks are ignored).
    pub fn predict(&self, samples: &[DatasetSample], mode: SampleMode, seed: u64, batch_size: usize) -> Result<Vec<SamplePrediction>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        for s in samples {
            if s.height() != self.resolution || s.width() != self.resolution {
                return Err(shape_err(format!(
                    "`{}` is {}×{} but the model expects {r}×{r}; resize the inputs (e.g. `--resize`)",
                    s.id,
                    s.height(),
                    s.width(),
                    r = self.resolution
                )));
            }
        }
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch_size) {
            let refs: Vec<&DatasetSample> = chunk.iter().collect();
            let images = image_batch(&refs, &vec![false; refs.len()], &self.norm, &self.device)?;
            let seeds: Vec<u64> = chunk.iter().map(|s| image_seed(seed, &s.id)).collect();
            for (s, (result, histories)) in chunk.iter().zip(predict_batch(&images, &self.model, &self.schedule, mode, &seeds)?) {
                let final_x0 = result.per_chain_final.first().cloned().ok_or_else(|| shape_err("no chain produced a prediction"))?;
                out.push(SamplePrediction { id: s.id.clone(), mask: result.mask, final_x0, histories });
            }
        }
        Ok(out)
    }
}

/// Quantizes a `[0, 1]` map to an 8-bit grayscale PNG.
pub fn write_png(path: &Path, map: &Array2<f64>) -> Result<()> {
    let (h, w) = map.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Intersection over union after thresholding the prediction at 0.5.
/// Two empty masks count as a perfect match.
pub fn mask_iou(pred: &Array2<f64>, gt: &Array2<bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(shape_err(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let on = p >= 0.5;
        inter += usize::from(on && g);
        union += usize::from(on || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Ground truth of a sample as booleans.
pub fn gt_of(sample: &DatasetSample) -> Array2<bool> {
    sample.mask.mapv(|v| v > 0.0)
}

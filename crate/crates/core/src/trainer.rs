//! Training: structure-corrupt the mask, noise it at a random step, predict
//! the clean mask and take an optimizer step. Two resolution phases, cosine
//! learning-rate decay, periodic checkpoints and a tab-separated metrics log.
//!
//! All randomness of step `n` comes from a generator seeded by
//! `(seed, n)` and the batch order of epoch `e` from `(seed, e)`, so a run
//! resumed from a checkpoint continues exactly as the uninterrupted run.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Device;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{checkpoint_name, write_latest, Checkpoint, Phase, TrainState};
use crate::config::RunConfig;
use crate::corruption::{q_sample_batch, structure_corrupt};
use crate::data::{image_batch, load_dataset, make_synthetic, mask_planes, stack_planes, DatasetSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::networks::{load_backbone_weights, CamoDiffusion};
use crate::nn::VarStore;
use crate::optim::{cosine_lr, AdamW};
use crate::rng::{mix_index, mix_seed, randn, rng_from};
use crate::schedule::NoiseSchedule;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_HEADER: &str = "step\tepoch\ttotal\tw_bce\tw_iou\tlr";

/// One logged optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the step.
    pub step: u64,
    /// 1-based epoch the step belongs to.
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

impl StepRecord {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{:.8}\t{:.8}\t{:.8}\t{:.8e}",
            self.step, self.epoch, self.loss.total, self.loss.w_bce, self.loss.w_iou, self.lr
        )
    }
}

/// Device selected by `CAMODIFF_DEVICE` (only `cpu` is built in).
pub fn device_from_env() -> Result<Device> {
    match std::env::var("CAMODIFF_DEVICE") {
        Err(_) => Ok(Device::Cpu),
        Ok(v) if v.eq_ignore_ascii_case("cpu") || v.is_empty() => Ok(Device::Cpu),
        Ok(v) => Err(Error::InvalidArgument(format!("unsupported device `{v}` (this build supports `cpu`)"))),
    }
}

/// Training samples of a phase at `resolution`.
pub fn load_training_set(cfg: &RunConfig, resolution: usize) -> Result<Vec<DatasetSample>> {
    match &cfg.data.root {
        Some(root) => load_dataset(root, resolution)?.collect(),
        None => Ok(make_synthetic(&cfg.data.synthetic)?
            .into_iter()
            .map(|s| if s.height() == resolution && s.width() == resolution { s } else { s.resized(resolution) })
            .collect()),
    }
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> usize {
    n_samples.div_ceil(batch_size)
}

pub struct Trainer {
    cfg: RunConfig,
    store: VarStore,
    model: CamoDiffusion,
    opt: AdamW,
    schedule: NoiseSchedule,
    state: TrainState,
}

impl Trainer {
    /// Fresh model initialized from `cfg.trainer.seed`.
    pub fn new(cfg: RunConfig, device: Device) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.trainer.seed;
        let store = VarStore::new(mix_seed(seed, "init"), device);
        let model = CamoDiffusion::new(&store, &cfg.model)?;
        if let Some(path) = &cfg.model.backbone_weights {
            load_backbone_weights(&store, path)?;
        }
        let opt = AdamW::new(store.named_vars(), cfg.optimizer.clone())?;
        let schedule = cfg.schedule.build()?;
        let state = TrainState { epoch: 0, global_step: 0, rng_seed: seed, phase: Phase::BaseRes };
        Ok(Self { cfg, store, model, opt, schedule, state })
    }

    /// Restores model, optimizer and progress from a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, device: Device) -> Result<Self> {
        let mut cfg = ckpt.config.clone();
        // Pretrained weights are already part of the parameters.
        cfg.model.backbone_weights = None;
        let mut trainer = Self::new(cfg, device)?;
        trainer.load_state(ckpt)?;
        Ok(trainer)
    }

    fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.store.load(&ckpt.params)?;
        self.opt.restore(ckpt.optimizer_step, &ckpt.moments)?;
        self.state = ckpt.state.clone();
        Ok(())
    }

    /// Replaces the run configuration, e.g. to extend the epoch count of a
    /// resumed run. The model architecture must not change.
    pub fn set_config(&mut self, cfg: RunConfig) -> Result<()> {
        cfg.validate()?;
        let architecture = |m: &crate::networks::ModelConfig| (m.atcn.clone(), m.dn.clone());
        if architecture(&cfg.model) != architecture(&self.cfg.model) {
            return Err(Error::InvalidArgument("model configuration differs from the checkpoint".into()));
        }
        let mut moments = std::collections::BTreeMap::new();
        for (name, m, v) in self.opt.moments() {
            moments.insert(name.to_string(), (m.clone(), v.clone()));
        }
        let step = self.opt.step_count();
        self.opt = AdamW::new(self.store.named_vars(), cfg.optimizer.clone())?;
        self.opt.restore(step, &moments)?;
        self.schedule = cfg.schedule.build()?;
        self.state.rng_seed = cfg.trainer.seed;
        self.cfg = cfg;
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &CamoDiffusion {
        &self.model
    }

    pub fn store(&self) -> &VarStore {
        &self.store
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let params = self
            .store
            .named_vars()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().clone()))
            .collect();
        let moments = self
            .opt
            .moments()
            .map(|(n, m, v)| (n.to_string(), (m.clone(), v.clone())))
            .collect();
        Ok(Checkpoint {
            config: self.cfg.clone(),
            state: self.state.clone(),
            params,
            moments,
            optimizer_step: self.opt.step_count(),
        })
    }

    /// The step indices `t ∈ {1..T}` drawn for the next optimizer step.
    pub fn draw_timesteps(&self, batch: usize) -> Vec<usize> {
        let mut rng = self.step_rng();
        (0..batch).map(|_| rng.random_range(1..=self.schedule.num_steps())).collect()
    }

    fn step_rng(&self) -> rand_chacha::ChaCha8Rng {
        rng_from(mix_index(mix_seed(self.state.rng_seed, "step"), self.state.global_step))
    }

    /// One optimizer step on `samples` at learning rate `lr`.
    pub fn train_step(&mut self, samples: &[&DatasetSample], lr: f64) -> Result<LossBreakdown> {
        let b = samples.len();
        let device = self.store.device().clone();
        let mut rng = self.step_rng();
        let timesteps: Vec<usize> = (0..b).map(|_| rng.random_range(1..=self.schedule.num_steps())).collect();
        let flips: Vec<bool> = (0..b).map(|_| self.cfg.data.hflip && rng.random_bool(0.5)).collect();

        let images = image_batch(samples, &flips, &self.cfg.data.normalization, &device)?;
        let masks = mask_planes(samples, &flips)?;
        let corrupted = masks
            .iter()
            .map(|m| structure_corrupt(m.view(), &self.cfg.corruption, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let x0 = stack_planes(&masks, &device)?;
        let x0_corrupt = stack_planes(&corrupted, &device)?;
        let (_, _, h, w) = x0.dims4()?;
        let noise = randn(&mut rng, &[b, 1, h, w], &device)?;
        let x_t = q_sample_batch(&self.schedule, &x0_corrupt, &timesteps, &noise)?;
        let times = timesteps.iter().map(|&t| self.schedule.time(t)).collect::<Result<Vec<_>>>()?;

        let x0_hat = self.model.forward(&x_t, &images, &times)?;
        let (loss, parts) = total_loss(&x0_hat, &x0)?;
        if !parts.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.global_step + 1,
                timesteps,
                w_bce: parts.w_bce,
                w_iou: parts.w_iou,
            });
        }
        let grads = loss.backward()?;
        self.opt.step(&grads, lr)?;
        self.state.global_step += 1;
        Ok(parts)
    }

    /// Runs epoch `self.state.epoch + 1` over `data` and returns its steps.
    pub fn run_epoch(&mut self, data: &[DatasetSample], total_steps: u64) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let epoch = self.state.epoch + 1;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_from(mix_index(mix_seed(self.state.rng_seed, "shuffle"), epoch as u64)));
        let mut records = Vec::with_capacity(steps_per_epoch(data.len(), self.cfg.trainer.batch_size));
        for chunk in order.chunks(self.cfg.trainer.batch_size) {
            let batch: Vec<&DatasetSample> = chunk.iter().map(|&i| &data[i]).collect();
            let lr = cosine_lr(self.cfg.optimizer.lr, self.state.global_step, total_steps);
            let loss = self.train_step(&batch, lr)?;
            records.push(StepRecord { step: self.state.global_step, epoch, loss, lr });
        }
        self.state.epoch = epoch;
        Ok(records)
    }
}

fn open_metrics(dir: &Path) -> Result<std::fs::File> {
    let path = dir.join(METRICS_FILE);
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    Ok(f)
}

fn save_checkpoint(trainer: &Trainer, dir: &Path) -> Result<PathBuf> {
    let name = checkpoint_name(trainer.state().epoch);
    let path = dir.join(&name);
    trainer.checkpoint()?.save(&path)?;
    write_latest(dir, &name)?;
    Ok(path)
}

/// Trains per `cfg` into `cfg.output.dir`, optionally continuing from a
/// checkpoint. Returns the path of the final checkpoint.
pub fn train_loop(cfg: &RunConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let device = device_from_env()?;
    let out = cfg.output.dir.clone();
    std::fs::create_dir_all(&out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path, &device)?;
            let mut t = Trainer::from_checkpoint(&ckpt, device)?;
            t.set_config(cfg.clone())?;
            log::info!("resuming from {} at epoch {}", path.display(), t.state().epoch);
            t
        }
        None => Trainer::new(cfg.clone(), device)?,
    };
    log::info!("model has {} parameters", trainer.store().num_parameters());

    let base_epochs = cfg.trainer.epochs;
    let total_epochs = base_epochs + cfg.trainer.finetune_epochs;
    let mut last = None;
    if trainer.state().epoch == 0 && resume.is_none() {
        last = Some(save_checkpoint(&trainer, &out)?);
    }
    if trainer.state().epoch >= total_epochs {
        return match last {
            Some(p) => Ok(p),
            None => save_checkpoint(&trainer, &out),
        };
    }

    let base = load_training_set(cfg, cfg.data.resolution)?;
    if base.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let n = base.len();
    let fine = if cfg.trainer.finetune_epochs > 0 {
        Some(load_training_set(cfg, cfg.data.finetune_resolution)?)
    } else {
        None
    };
    let total_steps = (total_epochs * steps_per_epoch(n, cfg.trainer.batch_size)) as u64;
    let mut metrics = open_metrics(&out)?;

    while trainer.state().epoch < total_epochs {
        let in_base = trainer.state().epoch < base_epochs;
        let (data, phase) = if in_base {
            (&base, Phase::BaseRes)
        } else {
            (fine.as_ref().expect("fine-tune set loaded"), Phase::FinetuneRes)
        };
        trainer.state.phase = phase;
        let records = trainer.run_epoch(data, total_steps)?;
        for r in &records {
            writeln!(metrics, "{}", r.tsv_line())?;
        }
        metrics.flush()?;
        if let Some(r) = records.last() {
            log::info!(
                "epoch {}/{total_epochs} step {} loss {:.4} (bce {:.4}, iou {:.4}) lr {:.2e}",
                r.epoch,
                r.step,
                r.loss.total,
                r.loss.w_bce,
                r.loss.w_iou,
                r.lr
            );
        }
        let epoch = trainer.state().epoch;
        if epoch % cfg.trainer.checkpoint_every == 0 || epoch == total_epochs {
            last = Some(save_checkpoint(&trainer, &out)?);
        }
    }
    Ok(last.expect("final epoch is always saved"))
}

//! Alternating generator / discriminator training with resumable state.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stt_tensor::{checkpoint, Tape, Tensor};

use crate::config::{DataSource, ExperimentConfig};
use crate::data::augment::augment;
use crate::data::patch::sample_patch;
use crate::data::synth::generate_synthetic;
use crate::data::volume::load_volume;
use crate::labels::LabelVolume;
use crate::losses::{bce_loss, boundary_target, fg_bg_adversarial_loss, semantic_target, total_loss, Discriminator};
use crate::model::SttUnet;
use crate::optim::Adam;
use crate::params::{ParamBuilder, ParamStore, Session};
use crate::{Error, Result};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    /// `bce(semantic) + bce(boundary)`.
    pub bce: f64,
    pub gen_loss: f64,
    pub disc_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainState {
    iteration: usize,
    generator_steps: u64,
    discriminator_steps: u64,
    config: ExperimentConfig,
}

pub const MODEL_STEM: &str = "model";
pub const DISC_STEM: &str = "discriminator";
const ADAM_G_STEM: &str = "adam_model";
const ADAM_D_STEM: &str = "adam_discriminator";
const STATE_FILE: &str = "state.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Deterministic per-iteration generator from `(seed, iteration)`.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(iteration as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"trainitr");
    ChaCha8Rng::from_seed(key)
}

/// Builds model and discriminator parameters from the config seed.
pub fn build_networks(cfg: &ExperimentConfig) -> Result<(SttUnet, ParamStore, Discriminator, ParamStore)> {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = SttUnet::new(&mut ParamBuilder::new(&mut params, &mut rng), &cfg.model, &cfg.sst)?;
    let mut disc_params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD15C);
    let disc = Discriminator::new(&mut ParamBuilder::new(&mut disc_params, &mut rng));
    Ok((model, params, disc, disc_params))
}

/// The training volume and its labels.
pub fn load_training_data(data: &DataSource) -> Result<(Tensor, LabelVolume)> {
    match data {
        DataSource::Synthetic { spec, seed } => generate_synthetic(spec, *seed),
        DataSource::Files { image, labels } => {
            let img = load_volume(image)?;
            let lab = load_volume(labels)?;
            if img.dims != lab.dims {
                return Err(Error::shape("training data", format!("image {:?} vs labels {:?}", img.dims, lab.dims)));
            }
            Ok((img.to_image(), lab.to_labels()?))
        }
    }
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub model: SttUnet,
    pub params: ParamStore,
    pub disc: Discriminator,
    pub disc_params: ParamStore,
    pub adam: Adam,
    pub disc_adam: Adam,
    /// Completed iterations.
    pub iteration: usize,
    image: Tensor,
    labels: LabelVolume,
}

struct Batch {
    image: Tensor,
    semantic: Tensor,
    boundary: Tensor,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let (image, labels) = load_training_data(&cfg.data)?;
        Self::with_data(cfg, image, labels)
    }

    pub fn with_data(cfg: ExperimentConfig, image: Tensor, labels: LabelVolume) -> Result<Self> {
        cfg.validate()?;
        let (model, params, disc, disc_params) = build_networks(&cfg)?;
        let adam = Adam::new(&cfg.optimizer, &params);
        let disc_adam = Adam::new(&cfg.optimizer, &disc_params);
        Ok(Self {
            cfg,
            model,
            params,
            disc,
            disc_params,
            adam,
            disc_adam,
            iteration: 0,
            image,
            labels,
        })
    }

    fn batch(&self) -> Result<Batch> {
        let mut rng = iteration_rng(self.cfg.seed, self.iteration);
        let p = self.cfg.model.patch;
        let n = self.cfg.batch_size;
        let (mut img, mut sem, mut bnd) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let patch = sample_patch(&self.image, &self.labels, p, &mut rng)?;
            let (image, labels) = augment(&patch.image, &patch.labels, &self.cfg.augment, &mut rng);
            img.extend_from_slice(image.data());
            sem.extend_from_slice(semantic_target(&labels).data());
            bnd.extend_from_slice(boundary_target(&labels).data());
        }
        Ok(Batch {
            image: Tensor::new(&[n, 1, p[0], p[1], p[2]], img)?,
            semantic: Tensor::new(&[n, p[0], p[1], p[2]], sem)?,
            boundary: Tensor::new(&[n, p[0], p[1], p[2]], bnd)?,
        })
    }

    /// One generator update followed by one discriminator update.
    ///
    /// Both use this iteration's prediction. The generator objective sees the
    /// discriminator as constants and the discriminator objective sees the
    /// prediction detached, so one reverse sweep over their sum yields both
    /// gradients without cross-talk.
    pub fn step(&mut self) -> Result<StepLog> {
        let batch = self.batch()?;
        let lw = self.cfg.losses.clone();
        let (log, grads, disc_grads) = {
            let tape = Tape::new();
            let gen = Session::new(&tape, &self.params, true);
            let frozen = Session::new(&tape, &self.disc_params, false);
            let live = Session::new(&tape, &self.disc_params, true);
            let x = tape.constant(batch.image);
            let out = self.model.forward(&gen, x)?;
            let bce_s = bce_loss(out.semantic, &batch.semantic)?;
            let bce_b = bce_loss(out.boundary, &batch.boundary)?;
            let mut m_pred = out.semantic.sigmoid();
            if lw.lambda == 0.0 {
                m_pred = m_pred.detach();
            }
            let dims = m_pred.shape();
            let image = x.reshape(&dims)?;
            let adv = fg_bg_adversarial_loss(&self.disc, &frozen, &live, image, m_pred, &batch.semantic, lw.lambda1)?;
            let total = total_loss(bce_s, bce_b, Some(adv.gen), lw.lambda)?;
            tape.backward(total.add(adv.disc)?)?;
            let log = StepLog {
                iter: self.iteration + 1,
                bce: bce_s.item() + bce_b.item(),
                gen_loss: adv.gen.item(),
                disc_loss: adv.disc.item(),
            };
            (log, gen.grads(), live.grads())
        };
        self.adam.update(&mut self.params, &grads);
        self.disc_adam.update(&mut self.disc_params, &disc_grads);
        self.iteration += 1;
        Ok(log)
    }

    /// Runs until `cfg.iterations`, logging and checkpointing under `output_dir`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let dir = self.cfg.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
        let log_path = dir.join(LOG_FILE);
        let mut log_file = fs::OpenOptions::new()
            .create(true)
            .append(self.iteration > 0)
            .write(true)
            .truncate(self.iteration == 0)
            .open(&log_path)
            .map_err(|source| Error::Io { path: log_path.clone(), source })?;
        let mut logs = Vec::new();
        while self.iteration < self.cfg.iterations {
            let log = self.step()?;
            let line = serde_json::to_string(&log).expect("log serializes");
            writeln!(log_file, "{line}").map_err(|source| Error::Io { path: log_path.clone(), source })?;
            on_step(&log);
            logs.push(log);
            let every = self.cfg.checkpoint_every;
            if every > 0 && self.iteration % every == 0 && self.iteration < self.cfg.iterations {
                self.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;
            }
        }
        self.save_checkpoint(&dir.join(CHECKPOINT_DIR))?;
        Ok(logs)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        self.params.save(&dir.join(MODEL_STEM))?;
        self.disc_params.save(&dir.join(DISC_STEM))?;
        checkpoint::save(&dir.join(ADAM_G_STEM), &self.adam.entries(&self.params))?;
        checkpoint::save(&dir.join(ADAM_D_STEM), &self.disc_adam.entries(&self.disc_params))?;
        let state = TrainState {
            iteration: self.iteration,
            generator_steps: self.adam.step,
            discriminator_steps: self.disc_adam.step,
            config: self.cfg.clone(),
        };
        let path = dir.join(STATE_FILE);
        let text = serde_json::to_string_pretty(&state).expect("state serializes");
        fs::write(&path, text).map_err(|source| Error::Io { path, source })
    }

    /// Restores a trainer; `iterations` may extend the saved run.
    pub fn resume(dir: &Path, iterations: Option<usize>) -> Result<Self> {
        let state = read_state(dir)?;
        let mut cfg = state.config;
        if let Some(n) = iterations {
            cfg.iterations = n;
        }
        let mut t = Self::new(cfg)?;
        t.params.load(&dir.join(MODEL_STEM))?;
        t.disc_params.load(&dir.join(DISC_STEM))?;
        t.adam
            .restore(&t.params, checkpoint::load(&dir.join(ADAM_G_STEM))?, state.generator_steps)?;
        t.disc_adam
            .restore(&t.disc_params, checkpoint::load(&dir.join(ADAM_D_STEM))?, state.discriminator_steps)?;
        t.iteration = state.iteration;
        Ok(t)
    }
}

fn read_state(dir: &Path) -> Result<TrainState> {
    let path = dir.join(STATE_FILE);
    let text = fs::read_to_string(&path).map_err(|source| Error::Io { path: path.clone(), source })?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
}

/// Config and trained model weights from a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(ExperimentConfig, SttUnet, ParamStore)> {
    let cfg = read_state(dir)?.config;
    let (model, mut params, _, _) = build_networks(&cfg)?;
    params.load(&dir.join(MODEL_STEM))?;
    Ok((cfg, model, params))
}

pub fn log_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join(LOG_FILE)
}

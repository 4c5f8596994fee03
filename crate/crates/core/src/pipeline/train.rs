use std::collections::HashSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{batch_tensor, preprocess, raw_stack, resolution_factor, ModelPredictor, PipelineError, Predictor};
use crate::data::{augment, derive_seed, downscale_landmarks, AugmentConfig, Image, Sample};
use crate::geometry::measurements_from_landmarks;
use crate::heatmap::{encode_labels, HeatmapConfig};
use crate::loss::{LossBreakdown, LossChain, LossConfig, LossError, LossTarget};
use crate::model::{save_checkpoint, CheckpointMeta, ModelConfig, UNet};
use crate::nn::{Adam, AdamConfig, Tensor};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

const AUGMENT_STREAM: u64 = 0x4155_474D;
const SHUFFLE_STREAM: u64 = 0x5348_5546;
const INIT_STREAM: u64 = 0x494E_4954;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub batch_train: usize,
    pub batch_val: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub heatmap: HeatmapConfig,
    pub augment: AugmentConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 120,
            lr_initial: 1e-3,
            lr_decay_factor: 0.1,
            lr_decay_every: 50,
            batch_train: 16,
            batch_val: 4,
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            heatmap: HeatmapConfig::default(),
            augment: AugmentConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.epochs == 0 || self.batch_train == 0 || self.batch_val == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch sizes and lr_decay_every must be positive".into());
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad(format!("lr_decay_factor must lie in (0, 1], got {}", self.lr_decay_factor));
        }
        self.model.validate()?;
        self.loss.weights.validate()?;
        resolution_factor(self.model.input_size)?;
        Ok(())
    }

    /// Hex SHA-256 of the JSON serialization, stored in checkpoints.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("train config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Step-decay schedule: `lr_initial * factor^(epoch / every)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr_initial * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train: LossBreakdown,
    pub val: Option<LossBreakdown>,
    /// Unix time in seconds.
    pub started_at: f64,
    pub finished_at: f64,
}

pub struct TrainOutcome {
    /// Weights after the last epoch.
    pub model: UNet<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub best_checkpoint: PathBuf,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Network input and loss target on the training raster.
fn prepare(s: &Sample, factor: usize, hm: &HeatmapConfig) -> Result<(Image, LossTarget), PipelineError> {
    let img = preprocess(&s.image, factor);
    let lm = downscale_landmarks(&s.landmarks, factor);
    let ms = measurements_from_landmarks(&lm);
    let (heatmaps, _) = encode_labels(&lm, &ms, img.height(), img.width(), hm)?;
    Ok((img, LossTarget { heatmaps, landmarks: lm }))
}

struct Trainer {
    cfg: TrainConfig,
    factor: usize,
    heatmap: HeatmapConfig,
    chain: LossChain,
    net: UNet<f32>,
    adam: Adam,
}

impl Trainer {
    fn new(cfg: &TrainConfig) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let factor = resolution_factor(cfg.model.input_size)?;
        Ok(Self {
            cfg: cfg.clone(),
            factor,
            heatmap: cfg.heatmap.scaled(1.0 / factor as f64),
            chain: LossChain::new(cfg.loss)?,
            net: UNet::new(cfg.model.clone(), derive_seed(cfg.seed, INIT_STREAM))?,
            adam: Adam::new(cfg.adam),
        })
    }

    fn non_finite(epoch: usize, batch: usize, breakdown: LossBreakdown, last: &Path) -> PipelineError {
        let last_checkpoint = if last.is_file() { last.display().to_string() } else { "none".to_string() };
        PipelineError::NonFiniteLoss { epoch, batch, breakdown, last_checkpoint }
    }

    fn train_epoch(&mut self, epoch: usize, lr: f64, samples: &[Sample], last: &Path) -> Result<LossBreakdown, PipelineError> {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ SHUFFLE_STREAM, epoch as u64)));
        let mut all = Vec::with_capacity(samples.len());
        for (b, chunk) in order.chunks(self.cfg.batch_train).enumerate() {
            let mut inputs = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let stream = (epoch * samples.len() + i) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ AUGMENT_STREAM, stream));
                let s = augment(&samples[i], &self.cfg.augment, &mut rng)?;
                let (img, tgt) = prepare(&s, self.factor, &self.heatmap)?;
                inputs.push(img);
                targets.push(tgt);
            }
            self.net.zero_grad();
            let out = match self.net.forward_train(&batch_tensor(&inputs)) {
                Err(crate::model::ModelError::NonFinite { layer }) => {
                    log::error!("non-finite activations in {layer}");
                    return Err(Self::non_finite(epoch, b, LossBreakdown { total: f64::NAN, ..Default::default() }, last));
                }
                r => r?,
            };
            let mut grad = Tensor::<f32>::zeros(out.shape());
            let scale = 1.0 / chunk.len() as f64;
            for (k, tgt) in targets.iter().enumerate() {
                let res = match self.chain.forward_backward(&raw_stack(&out, k), tgt) {
                    Err(LossError::NonFinite(bd)) => return Err(Self::non_finite(epoch, b, bd, last)),
                    r => r?,
                };
                for (g, v) in grad.item_mut(k).iter_mut().zip(&res.grad_raw) {
                    *g = (v * scale) as f32;
                }
                all.push(res.breakdown);
            }
            self.net.backward(&grad);
            let net = &mut self.net;
            self.adam.step::<f32>(lr, |v| net.visit(v));
        }
        Ok(LossBreakdown::mean(&all))
    }

    fn validate(&mut self, prepared: &[(Image, LossTarget)]) -> Result<LossBreakdown, PipelineError> {
        let mut all = Vec::with_capacity(prepared.len());
        for chunk in prepared.chunks(self.cfg.batch_val) {
            let inputs: Vec<Image> = chunk.iter().map(|(img, _)| img.clone()).collect();
            let out = self.net.forward_eval(&batch_tensor(&inputs))?;
            for (k, (_, tgt)) in chunk.iter().enumerate() {
                all.push(self.chain.forward(&raw_stack(&out, k), tgt)?.breakdown);
            }
        }
        Ok(LossBreakdown::mean(&all))
    }

    fn meta(&self, epoch: usize, val_loss: f64) -> CheckpointMeta {
        CheckpointMeta { model: self.cfg.model.clone(), train_config_hash: self.cfg.hash(), epoch: Some(epoch), val_loss: Some(val_loss) }
    }
}

fn check_disjoint(train: &[Sample], val: &[Sample]) -> Result<(), PipelineError> {
    let patients: HashSet<&str> = train.iter().map(|s| s.patient_id.as_str()).collect();
    if let Some(s) = val.iter().find(|s| patients.contains(s.patient_id.as_str())) {
        return Err(PipelineError::Config(format!("patient {} appears in both training and validation data", s.patient_id)));
    }
    Ok(())
}

/// Full training run. Writes the history, the last checkpoint after every
/// epoch and the checkpoint with the lowest validation loss (training loss
/// when `val` is empty) into `out_dir`.
pub fn train(cfg: &TrainConfig, train: &[Sample], val: &[Sample], out_dir: &Path) -> Result<TrainOutcome, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::Config("training set is empty".into()));
    }
    check_disjoint(train, val)?;
    let mut t = Trainer::new(cfg)?;
    std::fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let history_path = out_dir.join(HISTORY_FILE);
    let mut history_file = std::fs::File::create(&history_path).map_err(|e| PipelineError::io(&history_path, e))?;
    let (best_path, last_path) = (out_dir.join(BEST_CHECKPOINT), out_dir.join(LAST_CHECKPOINT));
    let val_prepared = val.iter().map(|s| prepare(s, t.factor, &t.heatmap)).collect::<Result<Vec<_>, _>>()?;

    let mut history = Vec::with_capacity(cfg.epochs);
    let (mut best_epoch, mut best_loss) = (0, f64::INFINITY);
    for epoch in 0..cfg.epochs {
        let started_at = unix_now();
        let clock = Instant::now();
        let lr = lr_at(cfg, epoch);
        let train_bd = t.train_epoch(epoch, lr, train, &last_path)?;
        let val_bd = if val_prepared.is_empty() { None } else { Some(t.validate(&val_prepared)?) };
        let selection = val_bd.map_or(train_bd.total, |v| v.total);
        if !selection.is_finite() {
            return Err(Trainer::non_finite(epoch, 0, val_bd.unwrap_or(train_bd), &last_path));
        }
        let record = EpochRecord { epoch, lr, train: train_bd, val: val_bd, started_at, finished_at: unix_now() };
        let line = serde_json::to_string(&record).expect("history records serialize");
        writeln!(history_file, "{line}").map_err(|e| PipelineError::io(&history_path, e))?;
        let meta = t.meta(epoch, selection);
        save_checkpoint(&last_path, &mut t.net, &meta)?;
        if selection < best_loss {
            best_loss = selection;
            best_epoch = epoch;
            save_checkpoint(&best_path, &mut t.net, &meta)?;
        }
        log::info!(
            "epoch {epoch:>3} lr {lr:.1e} train {:.4} val {} ({:.1}s)",
            train_bd.total,
            val_bd.map_or("-".to_string(), |v| format!("{:.4}", v.total)),
            clock.elapsed().as_secs_f64()
        );
        history.push(record);
    }
    Ok(TrainOutcome { model: t.net, history, best_epoch, best_loss, best_checkpoint: best_path })
}

/// Mean Euclidean distance between predicted and labeled landmarks, in full-resolution pixels.
pub fn mean_endpoint_error(predictor: &mut dyn Predictor, samples: &[Sample]) -> Result<f64, PipelineError> {
    let mut total = 0.0;
    for s in samples {
        let p = predictor.predict(s)?;
        total += p.points.iter().zip(&s.landmarks.points).map(|(a, b)| a.distance(b)).sum::<f64>() / 6.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

pub struct OverfitOutcome {
    pub model: UNet<f32>,
    pub epochs_run: usize,
    /// `(epoch, mean endpoint error in px)` at every check.
    pub errors: Vec<(usize, f64)>,
    pub train_loss: Vec<f64>,
}

impl OverfitOutcome {
    pub fn final_error(&self) -> f64 {
        self.errors.last().map_or(f64::INFINITY, |e| e.1)
    }
}

/// Fits a handful of samples with augmentation and dropout off and a
/// constant learning rate, stopping once the endpoint error drops below
/// `target_px`. The error is checked every `check_every` epochs in
/// evaluation mode.
pub fn overfit(
    cfg: &TrainConfig,
    samples: &[Sample],
    max_epochs: usize,
    target_px: f64,
    check_every: usize,
) -> Result<OverfitOutcome, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::Config("overfit needs at least one sample".into()));
    }
    let mut cfg = cfg.clone();
    cfg.augment = AugmentConfig::disabled();
    cfg.model.dropout_rate = 0.0;
    let mut t = Trainer::new(&cfg)?;
    let nowhere = PathBuf::new();
    let mut errors = Vec::new();
    let mut train_loss = Vec::new();
    let mut epochs_run = 0;
    for epoch in 0..max_epochs {
        train_loss.push(t.train_epoch(epoch, cfg.lr_initial, samples, &nowhere)?.total);
        epochs_run = epoch + 1;
        if epochs_run % check_every.max(1) == 0 || epochs_run == max_epochs {
            let mut p = ModelPredictor { net: t.net, factor: t.factor, name: String::new() };
            let err = mean_endpoint_error(&mut p, samples)?;
            t.net = p.net;
            log::info!("overfit epoch {epochs_run:>4} loss {:.5} endpoint error {err:.3} px", train_loss[epoch]);
            errors.push((epochs_run, err));
            if err < target_px {
                break;
            }
        }
    }
    Ok(OverfitOutcome { model: t.net, epochs_run, errors, train_loss })
}

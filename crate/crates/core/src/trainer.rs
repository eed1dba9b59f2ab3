//! Two-stage training: detection first with the SR decoder frozen, then joint
//! training with a reduced SR learning rate.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{self, Sample};
use crate::detection::LossWeights;
use crate::error::{config_err, Error, Result};
use crate::metrics;
use crate::model::{LossRecord, ModelConfig, SdcoNet};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub eta_feat_1: f64,
    pub eta_det_1: f64,
    pub eta_feat_2: f64,
    pub eta_det_2: f64,
    /// SR learning rate as a fraction of the detection rate in stage 2.
    pub rho: f64,
    /// Last stage-1 epoch (inclusive).
    pub t_det: usize,
    pub t_tot: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Epochs after which every learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss_weights: LossWeights,
    /// Passes over the dataset per epoch (each reshuffled).
    pub epoch_repeats: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta_feat_1: 1e-4,
            eta_det_1: 1e-4,
            eta_feat_2: 1e-4,
            eta_det_2: 1e-4,
            rho: 0.1,
            t_det: 2,
            t_tot: 6,
            batch_size: 2,
            clip_norm: 0.1,
            milestones: vec![4],
            lr_decay: 0.1,
            backbone_lr_mult: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss_weights: LossWeights::default(),
            epoch_repeats: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Full-length schedule with 16 detection-only epochs.
    pub fn published() -> Self {
        Self {
            t_det: 16,
            t_tot: 24,
            milestones: vec![20],
            ..Self::default()
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.rho > 0.0 && self.rho < 1.0) {
            out.push(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if self.t_det >= self.t_tot {
            out.push(format!("t_det ({}) must be smaller than t_tot ({})", self.t_det, self.t_tot));
        }
        if !(self.clip_norm > 0.0) {
            out.push(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be positive".into());
        }
        if self.epoch_repeats == 0 {
            out.push("epoch_repeats must be positive".into());
        }
        for (name, v) in [
            ("eta_feat_1", self.eta_feat_1),
            ("eta_det_1", self.eta_det_1),
            ("eta_feat_2", self.eta_feat_2),
            ("eta_det_2", self.eta_det_2),
            ("backbone_lr_mult", self.backbone_lr_mult),
            ("lr_decay", self.lr_decay),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        if self.weight_decay < 0.0 {
            out.push("weight_decay must be non-negative".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            out.push("beta1 and beta2 must lie in [0, 1)".into());
        }
        if let Err(e) = self.loss_weights.validate() {
            out.push(e.to_string());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            config_err(p.join("; "))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub lr: f64,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Groups {
    pub feat: GroupState,
    pub det: GroupState,
    pub sr: GroupState,
}

impl Groups {
    pub fn get(&self, g: ParamGroup) -> GroupState {
        match g {
            ParamGroup::Feat => self.feat,
            ParamGroup::Det => self.det,
            ParamGroup::Sr => self.sr,
        }
    }
}

/// Stage and per-group learning rates for a 1-based epoch.
pub fn routing(config: &TrainConfig, epoch: usize) -> (u8, Groups) {
    let decays = config.milestones.iter().filter(|&&m| m < epoch).count();
    let factor = config.lr_decay.powi(decays as i32);
    let stage = if epoch <= config.t_det { 1 } else { 2 };
    let (eta_feat, eta_det) = if stage == 1 {
        (config.eta_feat_1, config.eta_det_1)
    } else {
        (config.eta_feat_2, config.eta_det_2)
    };
    let det = eta_det * factor;
    let groups = Groups {
        feat: GroupState {
            lr: eta_feat * config.backbone_lr_mult * factor,
            frozen: false,
        },
        det: GroupState { lr: det, frozen: false },
        sr: GroupState {
            lr: if stage == 1 { 0.0 } else { config.rho * det },
            frozen: stage == 1,
        },
    };
    (stage, groups)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub steps: usize,
    /// Mean over the epoch's steps.
    pub losses: LossRecord,
    pub lrs: Groups,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub stage: u8,
    pub groups: Groups,
    pub step: u64,
    pub history: Vec<EpochRecord>,
    pub best_ap: Option<f64>,
}

/// Per-parameter first and second moments with their own step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            moments: Vec::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Vec<f64>>], lr_of: impl Fn(ParamGroup) -> f64) {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = &grads[id.index()] else { continue };
            if !store.is_trainable(id) {
                continue;
            }
            let lr = lr_of(store.get(id).group);
            let st = self.moments[id.index()].get_or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                t: 0,
            });
            st.t += 1;
            let bc1 = 1.0 - self.beta1.powi(st.t as i32);
            let bc2 = 1.0 - self.beta2.powi(st.t as i32);
            let p = store.value_mut(id).data_mut();
            for i in 0..p.len() {
                st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] *= 1.0 - lr * self.weight_decay;
                p[i] -= lr * (st.m[i] / bc1) / ((st.v[i] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Option<Vec<f64>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= coef));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub loss: LossRecord,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Batch-mean loss and dense per-parameter gradients.
pub struct BatchGrads {
    pub loss: LossRecord,
    pub grads: Vec<Option<Vec<f64>>>,
}

pub struct Trainer {
    pub model: SdcoNet,
    pub store: ParamStore,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(model_config: &ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = SdcoNet::new(&mut store, &mut rng, model_config)?;
        let mut t = Self {
            optimizer: AdamW::new(&config),
            model,
            store,
            config,
            state: TrainState::default(),
        };
        t.set_routing(1);
        Ok(t)
    }

    /// Applies the stage and learning rates of `epoch` (1-based) and the matching freeze flags.
    pub fn set_routing(&mut self, epoch: usize) {
        let (stage, groups) = routing(&self.config, epoch);
        self.state.stage = stage;
        self.state.groups = groups;
        for g in ParamGroup::ALL {
            self.store.set_frozen(g, groups.get(g).frozen);
        }
    }

    /// Forward and backward of the current stage's loss on each image, in parallel,
    /// summed in batch order and averaged.
    pub fn batch_grads(&self, batch: &[&Sample]) -> Result<BatchGrads> {
        let stage = self.state.stage;
        let per: Vec<(LossRecord, Vec<(ParamId, Vec<f64>)>)> = batch
            .par_iter()
            .map(|s| {
                let mut g = Graph::new(&self.store);
                let out = self.model.forward(&mut g, &s.lr, stage == 2)?;
                let boxes = s.gt_boxes()?;
                let (total, rec) = self.model.losses(
                    &mut g,
                    &out,
                    &boxes,
                    (stage == 2).then_some(&s.hr),
                    &self.config.loss_weights,
                    stage,
                )?;
                let grads = g.backward(total);
                let pg = grads.param_grads().into_iter().map(|(id, v)| (id, v.to_vec())).collect();
                Ok((rec, pg))
            })
            .collect::<Result<_>>()?;
        let n = batch.len().max(1) as f64;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];
        let mut loss = LossRecord::default();
        for (rec, pg) in per {
            loss.total += rec.total / n;
            loss.cls += rec.cls / n;
            loss.bbox += rec.bbox / n;
            loss.giou += rec.giou / n;
            loss.sa += rec.sa / n;
            if let Some(v) = rec.sr {
                *loss.sr.get_or_insert(0.0) += v / n;
            }
            for (id, v) in pg {
                match &mut grads[id.index()] {
                    Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(v),
                }
            }
        }
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x /= n));
        Ok(BatchGrads { loss, grads })
    }

    fn step(&mut self, batch: &[&Sample]) -> Result<StepRecord> {
        let BatchGrads { loss, mut grads } = self.batch_grads(batch)?;
        let finite_grads = grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()));
        if !loss.total.is_finite() || !finite_grads {
            return Err(Error::NonFiniteLoss {
                epoch: self.state.epoch + 1,
                step: self.state.step as usize,
                detail: format!("{loss:?}, finite gradients: {finite_grads}"),
            });
        }
        let grad_norm = clip_grad_norm(&mut grads, self.config.clip_norm);
        let clipped_norm = global_norm(&grads);
        let groups = self.state.groups;
        self.optimizer.step(&mut self.store, &grads, |g| groups.get(g).lr);
        self.state.step += 1;
        Ok(StepRecord {
            loss,
            grad_norm,
            clipped_norm,
        })
    }

    /// One update on the detection loss; the SR decoder must be frozen.
    pub fn stage_one_step(&mut self, batch: &[&Sample]) -> Result<StepRecord> {
        if self.state.stage != 1 || !self.store.is_frozen(ParamGroup::Sr) {
            return Err(Error::Contract("stage-one step outside stage 1".into()));
        }
        self.step(batch)
    }

    /// One update on the joint loss with all groups trainable.
    pub fn stage_two_step(&mut self, batch: &[&Sample]) -> Result<StepRecord> {
        if self.state.stage != 2 || self.store.is_frozen(ParamGroup::Sr) {
            return Err(Error::Contract("stage-two step outside stage 2".into()));
        }
        self.step(batch)
    }

    /// Sample order for an epoch; depends only on the seed and the epoch number.
    pub fn epoch_order(&self, len: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(0x5EED_0000 + epoch as u64));
        let mut order = Vec::with_capacity(len * self.config.epoch_repeats);
        for _ in 0..self.config.epoch_repeats {
            let mut pass: Vec<usize> = (0..len).collect();
            pass.shuffle(&mut rng);
            order.extend(pass);
        }
        order
    }

    /// Routes, then runs every batch of one epoch. Does not evaluate or checkpoint.
    pub fn run_epoch(&mut self, data: &[Sample], epoch: usize) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        self.set_routing(epoch);
        let order = self.epoch_order(data.len(), epoch);
        let mut sum = LossRecord::default();
        let mut steps = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let rec = if self.state.stage == 1 {
                self.stage_one_step(&batch)?
            } else {
                self.stage_two_step(&batch)?
            };
            sum.total += rec.loss.total;
            sum.cls += rec.loss.cls;
            sum.bbox += rec.loss.bbox;
            sum.giou += rec.loss.giou;
            sum.sa += rec.loss.sa;
            if let Some(v) = rec.loss.sr {
                *sum.sr.get_or_insert(0.0) += v;
            }
            steps += 1;
            log::debug!("epoch {epoch} step {steps}: loss {:.5}", rec.loss.total);
        }
        let n = steps as f64;
        let losses = LossRecord {
            total: sum.total / n,
            cls: sum.cls / n,
            bbox: sum.bbox / n,
            giou: sum.giou / n,
            sa: sum.sa / n,
            sr: sum.sr.map(|v| v / n),
        };
        self.state.epoch = epoch;
        Ok(EpochRecord {
            epoch,
            stage: self.state.stage,
            steps,
            losses,
            lrs: self.state.groups,
            ap: None,
            ap50: None,
        })
    }

    /// Trains from the epoch after `state.epoch` through `t_tot`.
    pub fn train(
        &mut self,
        data: &[Sample],
        opts: &TrainOptions,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            fs::create_dir_all(dir)?;
        }
        for epoch in self.state.epoch + 1..=self.config.t_tot {
            let mut rec = self.run_epoch(data, epoch)?;
            if let Some(eval) = opts.eval_data {
                let (report, _) = metrics::evaluate(&self.model, &self.store, eval)?;
                rec.ap = Some(report.detection.ap);
                rec.ap50 = Some(report.detection.ap50);
            }
            let improved = match (rec.ap, self.state.best_ap) {
                (Some(a), Some(b)) => a > b,
                (Some(_), None) => true,
                _ => false,
            };
            if improved {
                self.state.best_ap = rec.ap;
            }
            self.state.history.push(rec.clone());
            if let Some(path) = &opts.metrics_log {
                let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            if let Some(dir) = &opts.checkpoint_dir {
                let path = dir.join(format!("epoch_{epoch:04}.ckpt"));
                save_checkpoint(&path, self)?;
                if improved {
                    fs::copy(&path, dir.join(BEST_CHECKPOINT))?;
                }
                prune_checkpoints(dir, 2)?;
            }
            on_epoch(&rec);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_dir: Option<PathBuf>,
    /// Newline-delimited JSON, one record per epoch, appended.
    pub metrics_log: Option<PathBuf>,
    /// Scored after every epoch for the best-AP checkpoint.
    pub eval_data: Option<&'a [Sample]>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// Per-epoch checkpoints in `dir`, oldest first.
pub fn epoch_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("epoch_") && n.ends_with(".ckpt"))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let all = epoch_checkpoints(dir)?;
    for p in &all[..all.len().saturating_sub(keep)] {
        fs::remove_file(p)?;
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"SDCNCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct MomentEntry {
    name: String,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    state: TrainState,
    params: Vec<TensorEntry>,
    moments: Vec<MomentEntry>,
}

/// Everything needed to resume training or run inference.
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    params: Vec<(TensorEntry, Vec<f64>)>,
    moments: Vec<(MomentEntry, Vec<f64>, Vec<f64>)>,
}

/// Layout: magic, format version (u32 LE), header length (u64 LE), JSON
/// header, then parameter values and optimizer moments as f64 LE.
pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    let mut params = Vec::new();
    let mut moments = Vec::new();
    let mut body: Vec<u8> = Vec::new();
    let mut push = |v: &[f64]| v.iter().for_each(|x| body.extend_from_slice(&x.to_le_bytes()));
    for (_, p) in t.store.iter() {
        params.push(TensorEntry {
            name: p.name.clone(),
            group: p.group,
            shape: p.value.shape().to_vec(),
        });
        push(p.value.data());
    }
    for (id, p) in t.store.iter() {
        if let Some(Some(m)) = t.optimizer.moments.get(id.index()) {
            moments.push(MomentEntry {
                name: p.name.clone(),
                t: m.t,
            });
            push(&m.m);
            push(&m.v);
        }
    }
    let header = serde_json::to_vec(&Header {
        model: t.model.config.clone(),
        train: t.config.clone(),
        state: t.state.clone(),
        params,
        moments,
    })?;
    let mut bytes = Vec::with_capacity(20 + header.len() + body.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&body);
    data::write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])?;
    let mut cursor = body_start;
    let mut take = |n: usize| -> Result<Vec<f64>> {
        let end = cursor + n * 8;
        if end > bytes.len() {
            return Err(bad("truncated data"));
        }
        let v = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        Ok(v)
    };
    let mut params = Vec::with_capacity(header.params.len());
    for e in header.params {
        let n = e.shape.iter().product();
        let v = take(n)?;
        params.push((e, v));
    }
    let mut moments = Vec::with_capacity(header.moments.len());
    for e in header.moments {
        let n = params
            .iter()
            .find(|(p, _)| p.name == e.name)
            .map(|(_, v)| v.len())
            .ok_or_else(|| bad(&format!("moments for unknown parameter {}", e.name)))?;
        let m = take(n)?;
        let v = take(n)?;
        moments.push((e, m, v));
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        state: header.state,
        params,
        moments,
    })
}

impl Checkpoint {
    /// Rebuilds the network and copies the stored values into it.
    pub fn model(&self) -> Result<(SdcoNet, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = SdcoNet::new(&mut store, &mut rng, &self.model)?;
        if store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (e, v) in &self.params {
            let id = store
                .lookup(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", e.name)))?;
            if store.value(id).shape() != e.shape.as_slice() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", e.name)));
            }
            store.value_mut(id).data_mut().copy_from_slice(v);
        }
        Ok((model, store))
    }

    /// A trainer positioned after the last completed epoch.
    pub fn trainer(&self) -> Result<Trainer> {
        let (model, store) = self.model()?;
        let mut optimizer = AdamW::new(&self.train);
        optimizer.moments = vec![None; store.len()];
        for (e, m, v) in &self.moments {
            let id = store.lookup(&e.name).expect("checked while loading");
            optimizer.moments[id.index()] = Some(Moments {
                m: m.clone(),
                v: v.clone(),
                t: e.t,
            });
        }
        let mut t = Trainer {
            model,
            store,
            config: self.train.clone(),
            optimizer,
            state: self.state.clone(),
        };
        t.set_routing(t.state.epoch.max(1));
        t.state.history = self.state.history.clone();
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_scene, SceneSpec};

    fn tiny_data(n: u64) -> Vec<Sample> {
        let spec = SceneSpec {
            canvas: (32, 32),
            min_objects: 1,
            max_objects: 2,
            min_size: 6.0,
            max_size: 12.0,
            ..SceneSpec::default()
        };
        (0..n)
            .map(|i| {
                let mut s = synth_scene(&spec, i).unwrap();
                s.annotations.iter_mut().for_each(|a| a.class_id %= 2);
                s
            })
            .collect()
    }

    fn tiny_trainer(cfg: TrainConfig) -> Trainer {
        Trainer::new(&ModelConfig::tiny(), cfg).unwrap()
    }

    #[test]
    fn routing_law() {
        let cfg = TrainConfig::published();
        let (s, g) = routing(&cfg, 16);
        assert_eq!(s, 1);
        assert!(g.sr.frozen);
        let (s, g) = routing(&cfg, 17);
        assert_eq!(s, 2);
        assert!(!g.sr.frozen);
        assert!((g.sr.lr - 0.1 * 1e-4).abs() < 1e-20);
        assert!((g.feat.lr - 1e-5).abs() < 1e-20);
        // milestone 20 applies from epoch 21
        assert_eq!(routing(&cfg, 20).1.det.lr, 1e-4);
        assert!((routing(&cfg, 21).1.det.lr - 1e-5).abs() < 1e-20);
        let near_one = TrainConfig {
            rho: 0.999_999,
            ..TrainConfig::default()
        };
        let g = routing(&near_one, 3).1;
        assert!(g.sr.lr < g.det.lr);
    }

    #[test]
    fn config_problems_are_all_listed() {
        let cfg = TrainConfig {
            rho: 1.0,
            t_det: 6,
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.problems().len(), 3);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None, Some(vec![12.0])];
        let before = clip_grad_norm(&mut g, 0.1);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 0.1 + 1e-6);
        let mut small = vec![Some(vec![0.01])];
        clip_grad_norm(&mut small, 0.1);
        assert_eq!(small[0].as_ref().unwrap()[0], 0.01);
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Det, crate::Array::new(vec![2], vec![1.0, -1.0]));
        let b = store.add("b", ParamGroup::Sr, crate::Array::new(vec![2], vec![1.0, -1.0]));
        let mut opt = AdamW::new(&TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        });
        let grads = vec![Some(vec![0.3, -2.0]), Some(vec![0.3, -2.0])];
        opt.step(&mut store, &grads, |g| if g == ParamGroup::Sr { 1e-5 } else { 1e-4 });
        let da: Vec<f64> = store.value(a).data().iter().zip([1.0, -1.0]).map(|(x, y)| (x - y) / 1e-4).collect();
        let db: Vec<f64> = store.value(b).data().iter().zip([1.0, -1.0]).map(|(x, y)| (x - y) / 1e-5).collect();
        for (x, y) in da.iter().zip(&db) {
            assert!((x - y).abs() < 1e-6);
            assert!((x.abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stage_one_freezes_sr_and_trains_encoder() {
        let data = tiny_data(2);
        let mut t = tiny_trainer(TrainConfig::default());
        t.set_routing(1);
        let sr0 = t.store.snapshot(ParamGroup::Sr);
        let feat0 = t.store.snapshot(ParamGroup::Feat);
        let batch: Vec<&Sample> = data.iter().collect();
        let g = t.batch_grads(&batch).unwrap();
        let feat_norm: f64 = t
            .store
            .group_ids(ParamGroup::Feat)
            .iter()
            .filter_map(|id| g.grads[id.index()].as_ref())
            .flatten()
            .map(|x| x * x)
            .sum();
        assert!(feat_norm > 0.0);
        let rec = t.stage_one_step(&batch).unwrap();
        assert!(rec.loss.sr.is_none());
        assert!(rec.clipped_norm <= t.config.clip_norm + 1e-6);
        let w = t.config.loss_weights;
        let expect = w.cls * rec.loss.cls + w.bbox * rec.loss.bbox + w.giou * rec.loss.giou + w.sa * rec.loss.sa;
        assert!((rec.loss.total - expect).abs() < 1e-6);
        assert_eq!(t.store.snapshot(ParamGroup::Sr), sr0);
        assert_ne!(t.store.snapshot(ParamGroup::Feat), feat0);
        assert!(t.stage_two_step(&batch).is_err());
    }

    #[test]
    fn stage_two_sr_loss_reaches_sr_and_encoder() {
        let data = tiny_data(1);
        let cfg = TrainConfig {
            loss_weights: LossWeights {
                cls: 0.0,
                bbox: 0.0,
                giou: 0.0,
                sa: 0.0,
                sr: 1.0,
            },
            ..TrainConfig::default()
        };
        let mut t = tiny_trainer(cfg);
        t.set_routing(3);
        let g = t.batch_grads(&[&data[0]]).unwrap();
        let group_norm = |grp: ParamGroup| -> f64 {
            t.store
                .group_ids(grp)
                .iter()
                .filter_map(|id| g.grads[id.index()].as_ref())
                .flatten()
                .map(|x| x * x)
                .sum()
        };
        assert!(group_norm(ParamGroup::Sr) > 0.0);
        assert!(group_norm(ParamGroup::Feat) > 0.0);

        // no SR weight: the SR decoder is trainable but receives nothing
        t.config.loss_weights = LossWeights::default();
        t.config.loss_weights.sr = 0.0;
        let g = t.batch_grads(&[&data[0]]).unwrap();
        let sr: f64 = t
            .store
            .group_ids(ParamGroup::Sr)
            .iter()
            .filter_map(|id| g.grads[id.index()].as_ref())
            .flatten()
            .map(|x| x.abs())
            .sum();
        assert_eq!(sr, 0.0);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_rotate() {
        let data = tiny_data(3);
        let cfg = TrainConfig {
            t_det: 1,
            t_tot: 4,
            milestones: vec![3],
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            metrics_log: Some(dir.path().join("log.ndjson")),
            eval_data: Some(&data),
        };
        let mut a = tiny_trainer(cfg.clone());
        let mut transitions = 0;
        let mut last_stage = 1;
        a.train(&data, &opts, |r| {
            if r.stage != last_stage {
                transitions += 1;
                assert_eq!(r.epoch, 2);
            }
            last_stage = r.stage;
        })
        .unwrap();
        assert_eq!(transitions, 1);
        let mut b = tiny_trainer(cfg.clone());
        b.train(&data, &TrainOptions::default(), |_| {}).unwrap();
        let la = a.state.history.last().unwrap().losses.total;
        let lb = b.state.history.last().unwrap().losses.total;
        assert!((la - lb).abs() < 1e-6);

        let names: Vec<_> = epoch_checkpoints(dir.path()).unwrap();
        assert_eq!(names.len(), 2);
        assert!(names[1].ends_with("epoch_0004.ckpt"));
        assert!(dir.path().join(BEST_CHECKPOINT).exists());
        let log = fs::read_to_string(dir.path().join("log.ndjson")).unwrap();
        assert_eq!(log.lines().count(), 4);
        for line in log.lines() {
            let r: EpochRecord = serde_json::from_str(line).unwrap();
            if r.stage == 2 {
                assert!((r.lrs.sr.lr / r.lrs.det.lr - cfg.rho).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let data = tiny_data(2);
        let cfg = TrainConfig {
            t_det: 1,
            t_tot: 3,
            ..TrainConfig::default()
        };
        let mut full = tiny_trainer(cfg.clone());
        full.train(&data, &TrainOptions::default(), |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let mut first = tiny_trainer(TrainConfig { t_tot: 3, ..cfg.clone() });
        for e in 1..=2 {
            first.run_epoch(&data, e).unwrap();
        }
        let path = dir.path().join("mid.ckpt");
        save_checkpoint(&path, &first).unwrap();
        let mut resumed = load_checkpoint(&path).unwrap().trainer().unwrap();
        assert_eq!(resumed.state.epoch, 2);
        resumed.train(&data, &TrainOptions::default(), |r| assert_eq!(r.epoch, 3)).unwrap();
        for id in full.store.ids() {
            assert_eq!(full.store.value(id), resumed.store.value(id));
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io(_))));
    }
}

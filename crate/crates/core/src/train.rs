//! Adam with decoupled weight decay, the pretraining loop, checkpoints and
//! the per-epoch metrics CSV.
//!
//! Checkpoint layout (EQRC, little-endian):
//!
//! ```text
//! "EQRC" | version u16 | step u64 | rng: seed u64, next epoch u64 | meta: len u32, utf8
//! | tensor count u32 | per tensor: name len u16, utf8 name, dtype u8 (0 = f32),
//!   ndim u8, dims u32[ndim], payload f32[], crc32 u32 of the payload bytes
//! ```
//!
//! Per-epoch randomness (shuffle order and view parameters) is derived from
//! `(seed, epoch)`, so the pair is the complete RNG state.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::gradcore::{GradCheck, GradError, Scalar, Tape, Tensor};
use crate::losses::{self, LossReport, LossWeights};
use crate::model::{DecoderConfig, EncoderConfig, HeadConfig, Model, ModelConfig, ModelError, ParamStore};
use crate::views::{item_seed, make_view_pair, TransformSpec, ViewError};

pub const MAGIC: &[u8; 4] = b"EQRC";
pub const VERSION: u16 = 1;
pub const METRICS_HEADER: &str = "epoch,loss_total,loss_inv,loss_var,loss_cov,loss_recon,lr,seconds";
/// Batch size at which the base learning rate applies unscaled.
pub const REFERENCE_BATCH: usize = 2048;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {what} at epoch {epoch}, step {step}")]
    NonFinite { what: String, epoch: u64, step: u64 },
    #[error("checkpoint error at byte {offset}: {message}")]
    Checkpoint { offset: usize, message: String },
    #[error("checkpoint tensor {name:?} is corrupted (checksum mismatch)")]
    Corrupted { name: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Views(#[from] ViewError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

// ------------------------------------------------------------------ Adam

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

/// One Adam update of a single tensor at step `t >= 1`: decoupled decay
/// `theta *= 1 - lr * wd`, then the bias-corrected Adam step.
pub fn adam_update<T: Scalar>(theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, cfg: &AdamConfig) {
    assert!(t >= 1, "Adam step index starts at 1");
    assert!(theta.len() == grad.len() && grad.len() == m.len() && m.len() == v.len());
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let c1 = T::lit(1.0 - cfg.beta1.powi(t as i32));
    let c2 = T::lit(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps, decay) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(1.0 - cfg.lr * cfg.weight_decay));
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let mhat = m[i] / c1;
        let vhat = v[i] / c2;
        theta[i] = theta[i] * decay - lr * mhat / (vhat.sqrt() + eps);
    }
}

/// First and second moments for every tensor of a parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    /// Number of completed steps.
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = params.tensors().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Applies one optimizer step. `grads[i]` is `None` for parameters that the
/// loss does not reach; those are left untouched (no decay either).
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Option<Vec<f32>>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    if grads.len() != params.len() {
        return Err(TrainError::Mismatch(format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    let t = state.step + 1;
    if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
        return Err(TrainError::NonFinite {
            what: format!("gradient of {}", params.name(crate::model::ParamId(i))),
            epoch: 0,
            step: t,
        });
    }
    for (i, (theta, g)) in params.tensors_mut().zip(grads).enumerate() {
        if let Some(g) = g {
            adam_update(theta.data_mut(), g, state.m[i].data_mut(), state.v[i].data_mut(), t, cfg);
        }
    }
    state.step = t;
    Ok(())
}

// ------------------------------------------------------------------ checkpoints

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    /// First epoch (1-based) that has not been trained yet.
    pub next_epoch: u64,
    /// Free-form text stored with the weights (the resolved run config).
    pub meta: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.buf.len() - self.pos < n {
            return Err(TrainError::Checkpoint { offset: self.pos, message: format!("truncated while reading {}", what) });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8, TrainError> {
        Ok(self.take(1, what)?[0])
    }
    fn u16(&mut self, what: &str) -> Result<u16, TrainError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn utf8(&mut self, n: usize, what: &str) -> Result<String, TrainError> {
        let at = self.pos;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| TrainError::Checkpoint { offset: at, message: format!("{} is not utf-8", what) })
    }
}

const PARAM_PREFIX: &str = "param/";
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&self.next_epoch.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            let start = out.len();
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, TrainError> {
        let mut rd = Reader { buf, pos: 0 };
        if rd.take(4, "magic")? != MAGIC {
            return Err(TrainError::Checkpoint { offset: 0, message: "bad magic".into() });
        }
        let version = rd.u16("version")?;
        if version != VERSION {
            return Err(TrainError::Checkpoint { offset: 4, message: format!("unsupported version {}", version) });
        }
        let step = rd.u64("step")?;
        let seed = rd.u64("rng seed")?;
        let next_epoch = rd.u64("rng epoch")?;
        let meta_len = rd.u32("meta length")? as usize;
        let meta = rd.utf8(meta_len, "meta")?;
        let count = rd.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let name_len = rd.u16(&format!("name length of tensor {}", i))? as usize;
            let name = rd.utf8(name_len, &format!("name of tensor {}", i))?;
            let at = rd.pos;
            let dtype = rd.u8(&format!("dtype of {}", name))?;
            if dtype != 0 {
                return Err(TrainError::Checkpoint { offset: at, message: format!("unknown dtype {} for {}", dtype, name) });
            }
            let ndim = rd.u8(&format!("rank of {}", name))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(rd.u32(&format!("dims of {}", name))? as usize);
            }
            let numel: usize = dims.iter().product();
            let payload = rd.take(numel * 4, &format!("payload of {}", name))?;
            let crc = rd.u32(&format!("checksum of {}", name))?;
            if crc32fast::hash(payload) != crc {
                return Err(TrainError::Corrupted { name });
            }
            let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data)
                .map_err(|e| TrainError::Checkpoint { offset: at, message: format!("{}: {}", name, e) })?;
            tensors.push((name, t));
        }
        if rd.pos != buf.len() {
            return Err(TrainError::Checkpoint { offset: rd.pos, message: "trailing bytes".into() });
        }
        Ok(Self { step, seed, next_epoch, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn capture(model: &Model, adam: &AdamState, seed: u64, next_epoch: u64, meta: &str) -> Self {
        let mut tensors = Vec::with_capacity(3 * model.params.len());
        for (name, t) in model.params.iter() {
            tensors.push((format!("{}{}", PARAM_PREFIX, name), t.clone()));
        }
        for (i, (name, _)) in model.params.iter().enumerate() {
            tensors.push((format!("{}{}", M_PREFIX, name), adam.m[i].clone()));
            tensors.push((format!("{}{}", V_PREFIX, name), adam.v[i].clone()));
        }
        Self { step: adam.step, seed, next_epoch, meta: meta.to_string(), tensors }
    }

    fn find(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored parameters into `model` (names and shapes must match).
    pub fn restore_params(&self, model: &mut Model) -> Result<(), TrainError> {
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            let id = crate::model::ParamId(i);
            let stored = self
                .find(&format!("{}{}", PARAM_PREFIX, name))
                .ok_or_else(|| TrainError::Mismatch(format!("missing parameter {}", name)))?;
            if stored.shape() != model.params.get(id).shape() {
                return Err(TrainError::Mismatch(format!(
                    "parameter {} has shape {:?}, model expects {:?}",
                    name,
                    stored.shape(),
                    model.params.get(id).shape()
                )));
            }
            *model.params.get_mut(id) = stored.clone();
        }
        let expected = names.len();
        let stored = self.tensors.iter().filter(|(n, _)| n.starts_with(PARAM_PREFIX)).count();
        if stored != expected {
            return Err(TrainError::Mismatch(format!("checkpoint has {} parameters, model has {}", stored, expected)));
        }
        Ok(())
    }

    /// Restores parameters and optimizer moments.
    pub fn restore(&self, model: &mut Model) -> Result<AdamState, TrainError> {
        self.restore_params(model)?;
        let mut adam = AdamState::new(&model.params);
        for (i, (name, t)) in model.params.iter().enumerate() {
            for (prefix, slot) in [(M_PREFIX, &mut adam.m[i]), (V_PREFIX, &mut adam.v[i])] {
                let stored = self
                    .find(&format!("{}{}", prefix, name))
                    .ok_or_else(|| TrainError::Mismatch(format!("missing optimizer state {}{}", prefix, name)))?;
                if stored.shape() != t.shape() {
                    return Err(TrainError::Mismatch(format!("optimizer state {}{} has wrong shape", prefix, name)));
                }
                *slot = stored.clone();
            }
        }
        adam.step = self.step;
        Ok(adam)
    }
}

// ------------------------------------------------------------------ training loop

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: u64,
    pub adam: AdamConfig,
    /// Use `lr * batch / 2048` instead of the base rate.
    pub scale_lr: bool,
    pub seed: u64,
    pub loss: LossWeights,
    pub views: TransformSpec,
    /// Write a checkpoint every this many epochs (0: final checkpoint only).
    pub checkpoint_every: u64,
    /// Record wall-clock seconds in the metrics (otherwise 0, keeping the CSV reproducible).
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            epochs: 50,
            adam: AdamConfig::default(),
            scale_lr: false,
            seed: 0,
            loss: LossWeights::default(),
            views: TransformSpec::default(),
            checkpoint_every: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be at least 2".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::Config("epochs must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) || !(a.weight_decay >= 0.0) {
            return Err(TrainError::Config("adam betas must lie in [0, 1), eps > 0, weight decay >= 0".into()));
        }
        self.loss.validate()?;
        self.views.validate()?;
        Ok(())
    }

    pub fn effective_lr(&self) -> f64 {
        if self.scale_lr {
            self.adam.lr * self.batch_size as f64 / REFERENCE_BATCH as f64
        } else {
            self.adam.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    pub loss: LossReport,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, l.total, l.invariance, l.variance, l.covariance, l.recon, self.lr, self.seconds
        )
    }
}

pub struct TrainOutput<'a> {
    pub dir: &'a Path,
    /// Stored in every checkpoint's metadata field.
    pub meta: String,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochMetrics)>,
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("checkpoint_epoch_{:04}.eqrc", epoch))
}

pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.eqrc")
}

pub fn last_good_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("last_good.eqrc")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

/// Loss values and per-parameter gradients (`None` where the loss does not
/// reach the parameter) for one batch of source images.
pub fn batch_gradients(
    model: &Model,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: u64,
    step: u64,
) -> Result<(LossReport, Vec<Option<Vec<f32>>>), TrainError> {
    let images = dataset.batch(indices);
    let seeds: Vec<u64> = indices.iter().map(|&i| item_seed(cfg.seed, epoch, i as u64)).collect();
    let pair = make_view_pair(&images, &cfg.views, &seeds);
    let reconstruct = cfg.loss.lambda_recon > 0.0;
    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape);
    let f = model.layout.forward(&mut tape, &p, &pair.v1, &pair.v2, reconstruct)?;
    let terms = losses::vicreg_loss(&mut tape, f.emb1.inv, f.emb2.inv, &cfg.loss)?;
    let recon = match f.recon {
        Some(r) => {
            let target = tape.constant(pair.v2.clone());
            Some(losses::recon_loss(&mut tape, r, target)?)
        }
        None => None,
    };
    let total = losses::total_loss(&mut tape, &terms, recon, &cfg.loss)?;
    let report = losses::report(&tape, &terms, recon, total);
    if !report.all_finite() {
        return Err(TrainError::NonFinite { what: "loss".into(), epoch, step });
    }
    tape.backward(total)?;
    let grads = p.iter().map(|&v| tape.grad(v).map(|g| g.to_vec())).collect();
    Ok((report, grads))
}

/// One optimizer step on a batch of source images; returns the loss values.
pub fn train_step(
    model: &mut Model,
    adam: &mut AdamState,
    dataset: &Dataset,
    indices: &[usize],
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<LossReport, TrainError> {
    let (report, grads) = batch_gradients(model, dataset, indices, cfg, epoch, adam.step + 1)?;
    let adam_cfg = AdamConfig { lr: cfg.effective_lr(), ..cfg.adam.clone() };
    adam_step(&mut model.params, &grads, adam, &adam_cfg).map_err(|e| match e {
        TrainError::NonFinite { what, step, .. } => TrainError::NonFinite { what, epoch, step },
        other => other,
    })?;
    Ok(report)
}

/// Seeded order of the source images for `epoch`, cut into full batches.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, epoch, u64::MAX));
    order.shuffle(&mut rng);
    let b = batch_size.min(n);
    order.chunks_exact(b.max(1)).map(|c| c.to_vec()).collect()
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub metrics: Vec<EpochMetrics>,
    pub final_checkpoint: PathBuf,
}

/// Trains `model` from epoch 1 or from `resume`. Writes `metrics.csv`,
/// interval checkpoints and `final.eqrc` into `out.dir`. On a non-finite
/// loss the state before the failing step is saved as `last_good.eqrc`.
pub fn train(
    dataset: &Dataset,
    model: &mut Model,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    mut out: TrainOutput<'_>,
) -> Result<TrainSummary, TrainError> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(TrainError::Config(format!("training needs at least 2 images, dataset has {}", dataset.len())));
    }
    fs::create_dir_all(out.dir).map_err(io_err(out.dir))?;
    let (mut adam, first_epoch) = match resume {
        Some(ck) => {
            if ck.seed != cfg.seed {
                return Err(TrainError::Mismatch(format!("checkpoint seed {} differs from config seed {}", ck.seed, cfg.seed)));
            }
            (ck.restore(model)?, ck.next_epoch)
        }
        None => (AdamState::new(&model.params), 1),
    };
    let mpath = metrics_path(out.dir);
    let mut csv = String::new();
    writeln!(csv, "{}", METRICS_HEADER).unwrap();
    if first_epoch > 1 {
        // Keep the rows of the epochs already trained.
        let old = fs::read_to_string(&mpath).unwrap_or_default();
        for line in old.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|e| e.parse::<u64>().ok());
            if epoch.is_some_and(|e| e < first_epoch) {
                writeln!(csv, "{}", line).unwrap();
            }
        }
    }
    fs::write(&mpath, &csv).map_err(io_err(&mpath))?;

    let mut metrics = Vec::new();
    let lr = cfg.effective_lr();
    for epoch in first_epoch..=cfg.epochs {
        let start = Instant::now();
        let batches = epoch_batches(dataset.len(), cfg.batch_size, cfg.seed, epoch);
        let mut sum = LossReport::default();
        for idx in &batches {
            let r = match train_step(model, &mut adam, dataset, idx, cfg, epoch) {
                Ok(r) => r,
                Err(e @ TrainError::NonFinite { .. }) => {
                    // A failing step leaves parameters and moments untouched.
                    let ck = Checkpoint::capture(model, &adam, cfg.seed, epoch, &out.meta);
                    ck.save(&last_good_checkpoint_path(out.dir))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            sum.invariance += r.invariance;
            sum.variance += r.variance;
            sum.covariance += r.covariance;
            sum.recon += r.recon;
            sum.total += r.total;
        }
        let k = batches.len() as f64;
        let loss = LossReport {
            invariance: sum.invariance / k,
            variance: sum.variance / k,
            covariance: sum.covariance / k,
            recon: sum.recon / k,
            total: sum.total / k,
        };
        let seconds = if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 };
        let m = EpochMetrics { epoch, loss, lr, seconds };
        writeln!(csv, "{}", m.csv_row()).unwrap();
        fs::write(&mpath, &csv).map_err(io_err(&mpath))?;
        if let Some(cb) = out.on_epoch.as_mut() {
            cb(&m);
        }
        metrics.push(m);
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            Checkpoint::capture(model, &adam, cfg.seed, epoch + 1, &out.meta).save(&checkpoint_path(out.dir, epoch))?;
        }
    }
    let final_path = final_checkpoint_path(out.dir);
    Checkpoint::capture(model, &adam, cfg.seed, cfg.epochs + 1, &out.meta).save(&final_path)?;
    Ok(TrainSummary { metrics, final_checkpoint: final_path })
}

/// Finite-difference check of the complete training loss (both branches)
/// with respect to every parameter of a small model.
pub fn model_gradcheck(seed: u64) -> Result<GradCheck, TrainError> {
    let cfg = ModelConfig {
        encoder: EncoderConfig { image_size: 4, patch_size: 2, dim: 8, depth: 1, heads: 2, mlp_ratio: 1 },
        head: HeadConfig { hidden: 8, out: 8 },
        decoder: DecoderConfig { blocks: 2, dim: 8, heads: 2, mlp_ratio: 1 },
        attention_scaling: true,
    };
    let mut model = Model::new(cfg, seed)?;
    // The output projection starts at zero, which would leave everything
    // upstream of it without gradient.
    let out = model.layout.dec_out.w;
    model.params.get_mut(out).data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = (i as f32 * 0.37).sin() * 0.3);
    let inputs: Vec<Tensor<f64>> = model.params.cast::<f64>().tensors().cloned().collect();
    let v1 = Tensor::<f64>::from_fn(vec![3, 3, 4, 4], |i| 0.5 + 0.4 * (i as f64 * 0.61).sin());
    let v2 = Tensor::<f64>::from_fn(vec![3, 3, 4, 4], |i| 0.5 + 0.4 * (i as f64 * 0.23).cos());
    let layout = model.layout.clone();
    let weights = LossWeights::default();
    Ok(GradCheck::new("full_model", None, inputs, move |t, p| {
        let f = layout.forward(t, p, &v1, &v2, true).map_err(|e| GradError::Contract(e.to_string()))?;
        let terms = losses::vicreg_loss(t, f.emb1.inv, f.emb2.inv, &weights)?;
        let target = t.constant(v2.clone());
        let recon = losses::recon_loss(t, f.recon.expect("decoder requested"), target)?;
        losses::total_loss(t, &terms, Some(recon), &weights)
    }))
}

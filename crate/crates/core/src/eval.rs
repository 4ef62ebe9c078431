//! Frozen-encoder probes: transform-parameter regression scored with R², and
//! linear classification.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::gradcore::{GradError, Tape, Tensor, Var};
use crate::model::{linear, Feature, Init, Linear, Model, ModelError, ParamStore};
use crate::train::{adam_update, AdamConfig};
use crate::views::{item_seed, make_view_pair, pair_params, TransformSpec};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid probe config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grad(#[from] GradError),
}

// ------------------------------------------------------------------ R²

#[derive(Clone, Debug, PartialEq)]
pub struct RSquared {
    /// `None` for target dimensions with zero variance.
    pub per_dim: Vec<Option<f64>>,
    /// Mean over the dimensions that were scored.
    pub mean: f64,
    pub warnings: Vec<String>,
}

/// `1 - SS_res / SS_tot` per column of `[M, d]` row-major data. Columns whose
/// true values are constant are excluded and reported in `warnings`.
pub fn r_squared(y_true: &[Vec<f64>], y_pred: &[Vec<f64>]) -> Result<RSquared, EvalError> {
    if y_true.len() != y_pred.len() {
        return Err(EvalError::Contract(format!("{} targets but {} predictions", y_true.len(), y_pred.len())));
    }
    if y_true.len() < 2 {
        return Err(EvalError::Contract(format!("R² needs at least 2 samples, got {}", y_true.len())));
    }
    let d = y_true[0].len();
    if let Some(i) = y_true.iter().zip(y_pred).position(|(t, p)| t.len() != d || p.len() != d) {
        return Err(EvalError::Contract(format!("row {} does not have {} columns", i, d)));
    }
    let m = y_true.len() as f64;
    let mut per_dim = Vec::with_capacity(d);
    let mut warnings = Vec::new();
    for j in 0..d {
        let mean = y_true.iter().map(|r| r[j]).sum::<f64>() / m;
        let ss_tot: f64 = y_true.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum();
        if ss_tot <= 0.0 {
            warnings.push(format!("target dimension {} has zero variance; excluded from R²", j));
            per_dim.push(None);
            continue;
        }
        let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t[j] - p[j]) * (t[j] - p[j])).sum();
        per_dim.push(Some(1.0 - ss_res / ss_tot));
    }
    let scored: Vec<f64> = per_dim.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(EvalError::Contract("every target dimension has zero variance".into()));
    }
    let mean = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(RSquared { per_dim, mean, warnings })
}

// ------------------------------------------------------------------ probes

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Hidden width of the regression MLP.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of samples used for fitting; the rest is held out.
    pub train_fraction: f64,
    /// Representation fed to the regression probe.
    pub feature: Feature,
    /// Encoder batch size during feature extraction.
    pub chunk: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 256, epochs: 100, batch_size: 256, lr: 1e-3, train_fraction: 0.8, feature: Feature::Equi, chunk: 256 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 || self.chunk == 0 {
            return Err(EvalError::Config("hidden, epochs, batch_size and chunk must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(EvalError::Config("lr must be positive".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(EvalError::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Seeded shuffle of `0..n` cut into `(train, held_out)`.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), EvalError> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(EvalError::Contract(format!("cannot split {} samples into non-empty train and held-out sets", n)));
    }
    let held_out = order.split_off(n_train);
    Ok((order, held_out))
}

/// Per-column mean and standard deviation of the training rows; the
/// standard deviation of a constant column is reported as 1.
fn column_stats(rows: &[&Vec<f32>]) -> (Vec<f32>, Vec<f32>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for r in rows {
        for (m, &x) in mean.iter_mut().zip(r.iter()) {
            *m += x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for r in rows {
        for ((v, &x), &m) in var.iter_mut().zip(r.iter()).zip(&mean) {
            *v += (x as f64 - m) * (x as f64 - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).map(|s| if s > 1e-12 { s as f32 } else { 1.0 }).collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

/// A feed-forward probe: linear layers with GELU between them.
struct Mlp {
    params: ParamStore<f32>,
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(widths: &[usize], seed: u64) -> Self {
        let mut init = Init::new(seed);
        let layers = widths.windows(2).enumerate().map(|(i, w)| init.linear(&format!("probe.{}", i), w[0], w[1], true)).collect();
        Self { params: init.store, layers }
    }

    fn forward(&self, tape: &mut Tape<f32>, p: &[Var], x: Var) -> Result<Var, GradError> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                h = tape.gelu(h);
            }
            h = linear(tape, p, l, h)?;
        }
        Ok(h)
    }

    fn predict(&self, x: &[Vec<f32>]) -> Result<Vec<Vec<f32>>, GradError> {
        let mut out = Vec::with_capacity(x.len());
        for chunk in x.chunks(1024) {
            let mut tape = Tape::<f32>::new();
            let p = self.params.bind_frozen(&mut tape);
            let xt = tape.constant(rows_tensor(chunk.iter()));
            let y = self.forward(&mut tape, &p, xt)?;
            let t = tape.value(y);
            out.extend(t.data().chunks(t.shape()[1]).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

fn rows_tensor<'a>(rows: impl ExactSizeIterator<Item = &'a Vec<f32>> + Clone) -> Tensor<f32> {
    let n = rows.len();
    let d = rows.clone().next().map_or(0, |r| r.len());
    Tensor::from_vec(vec![n, d], rows.flat_map(|r| r.iter().copied()).collect())
}

enum Objective<'a> {
    Regression(&'a [Vec<f32>]),
    Classes(&'a [usize]),
}

/// Fits `mlp` on the rows `train` of `x` with Adam (no weight decay).
fn fit(mlp: &mut Mlp, x: &[Vec<f32>], target: Objective<'_>, train: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<(), EvalError> {
    let adam = AdamConfig { lr: cfg.lr, weight_decay: 0.0, ..Default::default() };
    let mut m: Vec<Vec<f32>> = mlp.params.tensors().map(|t| vec![0.0; t.len()]).collect();
    let mut v = m.clone();
    let mut order = train.to_vec();
    let mut t = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(item_seed(seed, epoch as u64, u64::MAX)));
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::<f32>::new();
            let p = mlp.params.bind(&mut tape);
            let xt = tape.constant(rows_tensor(batch.iter().map(|&i| &x[i])));
            let out = mlp.forward(&mut tape, &p, xt)?;
            let loss = match target {
                Objective::Regression(y) => {
                    let yt = tape.constant(rows_tensor(batch.iter().map(|&i| &y[i])));
                    tape.mse(out, yt)?
                }
                Objective::Classes(labels) => {
                    let l: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                    tape.cross_entropy(out, &l)?
                }
            };
            if !tape.value(loss).item().is_finite() {
                return Err(EvalError::Contract(format!("probe loss became non-finite in epoch {}", epoch + 1)));
            }
            tape.backward(loss)?;
            t += 1;
            let grads: Vec<Vec<f32>> =
                p.iter().zip(mlp.params.tensors()).map(|(&var, w)| tape.grad(var).map_or(vec![0.0; w.len()], |g| g.to_vec())).collect();
            drop(tape);
            for (i, w) in mlp.params.tensors_mut().enumerate() {
                adam_update(w.data_mut(), &grads[i], &mut m[i], &mut v[i], t, &adam);
            }
        }
    }
    Ok(())
}

fn standardized(x: &[Vec<f32>], train: &[usize]) -> Vec<Vec<f32>> {
    let rows: Vec<&Vec<f32>> = train.iter().map(|&i| &x[i]).collect();
    let (mean, std) = column_stats(&rows);
    x.iter().map(|r| r.iter().zip(&mean).zip(&std).map(|((&v, &m), &s)| (v - m) / s).collect()).collect()
}

// ------------------------------------------------------------------ regression report

#[derive(Clone, Debug, PartialEq)]
pub struct R2Report {
    /// Held-out R² per normalized parameter (`family.param`); `None` when excluded.
    pub params: Vec<(String, Option<f64>)>,
    /// Held-out R² per family: mean over the family's scored parameters.
    pub families: Vec<(String, f64)>,
    /// Mean held-out R² over all scored parameters.
    pub mean: f64,
    /// The same statistics on the training split.
    pub train_params: Vec<(String, Option<f64>)>,
    pub train_families: Vec<(String, f64)>,
    pub train_size: usize,
    pub test_size: usize,
    pub warnings: Vec<String>,
}

impl R2Report {
    pub fn family(&self, name: &str) -> Option<f64> {
        self.families.iter().find(|(n, _)| n == name).map(|(_, r)| *r)
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).and_then(|(_, r)| *r)
    }

    /// `family,r2` rows: each family, each parameter of multi-parameter
    /// families as `family.param`, then `mean`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("family,r2\n");
        for (name, r) in &self.families {
            writeln!(out, "{},{}", name, r).unwrap();
        }
        for (name, r) in self.multi_param_rows() {
            writeln!(out, "{},{}", name, r.map_or("excluded".to_string(), |r| r.to_string())).unwrap();
        }
        writeln!(out, "mean,{}", self.mean).unwrap();
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<22} {:>9}\n", "family", "R²");
        for (name, r) in &self.families {
            writeln!(out, "{:<22} {:>9.4}", name, r).unwrap();
        }
        for (name, r) in self.multi_param_rows() {
            let v = r.map_or("excluded".to_string(), |r| format!("{:.4}", r));
            writeln!(out, "  {:<20} {:>9}", name, v).unwrap();
        }
        writeln!(out, "{:<22} {:>9.4}", "mean", self.mean).unwrap();
        write!(out, "train {} / held-out {}", self.train_size, self.test_size).unwrap();
        out
    }

    fn multi_param_rows(&self) -> impl Iterator<Item = &(String, Option<f64>)> {
        self.params.iter().filter(move |(name, _)| {
            let family = name.split('.').next().unwrap_or("");
            self.params.iter().filter(|(n, _)| n.split('.').next() == Some(family)).count() > 1
        })
    }
}

fn group_by_family(names: &[String], r2: &RSquared) -> (Vec<(String, Option<f64>)>, Vec<(String, f64)>, Vec<String>) {
    let params: Vec<(String, Option<f64>)> = names.iter().cloned().zip(r2.per_dim.iter().copied()).collect();
    let mut families: Vec<(String, f64)> = Vec::new();
    let mut warnings = Vec::new();
    let mut order: Vec<&str> = names.iter().map(|n| n.split('.').next().unwrap()).collect();
    order.dedup();
    for fam in order {
        let scored: Vec<f64> = params.iter().filter(|(n, _)| n.split('.').next() == Some(fam)).filter_map(|(_, r)| *r).collect();
        if scored.is_empty() {
            warnings.push(format!("family {} has no scored parameters", fam));
        } else {
            families.push((fam.to_string(), scored.iter().sum::<f64>() / scored.len() as f64));
        }
    }
    (params, families, warnings)
}

/// Trains the 3-layer MLP probe on `features -> targets` (80/20 seeded split)
/// and scores it with R². `names[j]` is `family.param` for target column `j`.
pub fn regression_probe(
    features: &[Vec<f32>],
    targets: &[Vec<f64>],
    names: &[String],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<R2Report, EvalError> {
    cfg.validate()?;
    if features.len() != targets.len() || features.is_empty() {
        return Err(EvalError::Contract(format!("{} feature rows for {} targets", features.len(), targets.len())));
    }
    let d_out = names.len();
    if targets.iter().any(|t| t.len() != d_out) {
        return Err(EvalError::Contract(format!("targets must have {} columns", d_out)));
    }
    let (train, test) = split_indices(features.len(), cfg.train_fraction, seed)?;
    let x = standardized(features, &train);
    let y: Vec<Vec<f32>> = targets.iter().map(|t| t.iter().map(|&v| v as f32).collect()).collect();
    let d_in = x[0].len();
    let mut mlp = Mlp::new(&[d_in, cfg.hidden, cfg.hidden, d_out], item_seed(seed, 0, 1));
    fit(&mut mlp, &x, Objective::Regression(&y), &train, cfg, seed)?;
    let pred = mlp.predict(&x)?;
    let score = |idx: &[usize]| {
        let t: Vec<Vec<f64>> = idx.iter().map(|&i| targets[i].clone()).collect();
        let p: Vec<Vec<f64>> = idx.iter().map(|&i| pred[i].iter().map(|&v| v as f64).collect()).collect();
        r_squared(&t, &p)
    };
    let held = score(&test)?;
    let fitted = score(&train)?;
    let (params, families, mut warnings) = group_by_family(names, &held);
    let (train_params, train_families, _) = group_by_family(names, &fitted);
    warnings.splice(0..0, held.warnings.iter().map(|w| format!("held-out: {}", w)));
    Ok(R2Report {
        params,
        families,
        mean: held.mean,
        train_params,
        train_families,
        train_size: train.len(),
        test_size: test.len(),
        warnings,
    })
}

/// What the equivariance probe reads.
#[derive(Clone, Copy, Debug)]
pub enum ProbeInput<'a> {
    /// `concat(rep(v1), rep(v2))` from a frozen encoder.
    Encoder(&'a Model),
    /// The true normalized parameters themselves; checks the probe harness.
    Oracle,
}

/// Builds one view pair per dataset image (item `i` seeded from
/// `(seed, i)`), extracts frozen features and regresses the normalized
/// relative transform parameters.
pub fn eval_equivariance(
    input: ProbeInput<'_>,
    dataset: &Dataset,
    spec: &TransformSpec,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<R2Report, EvalError> {
    cfg.validate()?;
    spec.validate().map_err(|e| EvalError::Config(e.to_string()))?;
    let n = dataset.len();
    let seeds: Vec<u64> = (0..n as u64).map(|i| item_seed(seed, 0, i)).collect();
    let mut targets = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    match input {
        ProbeInput::Oracle => {
            for &s in &seeds {
                let t = spec.normalize(&pair_params(spec, s).1);
                features.push(t.iter().map(|&v| v as f32).collect());
                targets.push(t);
            }
        }
        ProbeInput::Encoder(model) => {
            let indices: Vec<usize> = (0..n).collect();
            for (idx, s) in indices.chunks(cfg.chunk).zip(seeds.chunks(cfg.chunk)) {
                let pair = make_view_pair(&dataset.batch(idx), spec, s);
                let f1 = model.features(&pair.v1, cfg.feature, cfg.chunk)?;
                let f2 = model.features(&pair.v2, cfg.feature, cfg.chunk)?;
                features.extend(f1.into_iter().zip(f2).map(|(mut a, b)| {
                    a.extend(b);
                    a
                }));
                targets.extend(pair.targets(spec));
            }
        }
    }
    regression_probe(&features, &targets, &spec.target_names(), cfg, seed)
}

// ------------------------------------------------------------------ classification

#[derive(Clone, Debug, PartialEq)]
pub struct ClassificationReport {
    /// Held-out top-1 accuracy.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
}

/// Linear softmax probe on `features` with class indices `labels`
/// (`0..classes`), 80/20 seeded split.
pub fn classification_probe(
    features: &[Vec<f32>],
    labels: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ClassificationReport, EvalError> {
    cfg.validate()?;
    if features.len() != labels.len() || features.is_empty() {
        return Err(EvalError::Contract(format!("{} feature rows for {} labels", features.len(), labels.len())));
    }
    let classes = labels.iter().max().unwrap() + 1;
    let (train, test) = split_indices(features.len(), cfg.train_fraction, seed)?;
    let x = standardized(features, &train);
    let mut probe = Mlp::new(&[x[0].len(), classes], item_seed(seed, 0, 1));
    fit(&mut probe, &x, Objective::Classes(labels), &train, cfg, seed)?;
    let logits = probe.predict(&x)?;
    let accuracy = |idx: &[usize]| {
        let hits = idx.iter().filter(|&&i| argmax(&logits[i]) == labels[i]).count();
        hits as f64 / idx.len() as f64
    };
    Ok(ClassificationReport {
        accuracy: accuracy(&test),
        train_accuracy: accuracy(&train),
        classes,
        train_size: train.len(),
        test_size: test.len(),
    })
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Linear probe on the pooled representation of the un-augmented images.
/// Dataset labels are mapped to dense class indices in sorted order.
pub fn eval_classification(model: &Model, dataset: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<ClassificationReport, EvalError> {
    let classes = dataset.classes();
    if classes.len() < 2 {
        return Err(EvalError::Contract(format!("classification needs at least 2 classes, dataset has {}", classes.len())));
    }
    let labels: Vec<usize> =
        dataset.records.iter().map(|r| classes.binary_search(&r.label).expect("label listed by classes()")).collect();
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut features = Vec::with_capacity(dataset.len());
    for idx in indices.chunks(cfg.chunk) {
        features.extend(model.features(&dataset.batch(idx), Feature::Pooled, cfg.chunk)?);
    }
    classification_probe(&features, &labels, cfg, seed)
}

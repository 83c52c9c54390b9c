//! Evaluation: MAC accounting, frozen-embedding probes, the ablation and
//! `p_t` sweep harnesses, the patch-embedding benchmark and grad-norm telemetry.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datagen::{BandsetScheme, Dims, Label, LabeledDataset, ModalityRegistry, Role, Scene, SceneGenerator, TaskKind};
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::maskplan::{random_mask, MaskingStrategy};
use crate::model::{Model, ModelConfig};
use crate::numerics::{kernels, Tape};
use crate::seed;
use crate::tokenize::{conv_patch_embed_reference, conv_weight_to_linear, patchify_on, ProjectionMode, TokenGrid};
use crate::train::{fan_out, pretrain, thread_budget, StepMetrics};

/// Multiply-accumulates in affine and attention contractions only; norms,
/// activations, softmax and embedding additions are free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacsReport {
    pub projection: u64,
    pub encoder_attention: u64,
    pub encoder_mlp: u64,
    /// Decoding one random-mask plan at ratio 0.5 (seed 0); not part of [`MacsReport::encode`].
    pub decoder: u64,
    pub tokens: Vec<(String, usize)>,
    pub encoder_tokens: usize,
    pub total: u64,
}

impl MacsReport {
    /// MACs to encode one example.
    pub fn encode(&self) -> u64 {
        self.projection + self.encoder_attention + self.encoder_mlp
    }
}

/// Attention MACs of one block over `n` tokens of width `d`.
pub fn attention_macs(n: u64, d: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d
}

pub fn mlp_macs(n: u64, d: u64, hidden: u64) -> u64 {
    2 * n * d * hidden
}

/// Decoder MACs for `visible` encoder outputs and `targets` mask tokens.
pub fn decoder_macs(cfg: &ModelConfig, visible: usize, targets: usize) -> u64 {
    let (d, dd) = (cfg.width as u64, cfg.decoder_width as u64);
    let n = (visible + targets) as u64;
    let blocks = cfg.decoder_depth as u64 * (attention_macs(n, dd) + mlp_macs(n, dd, dd * cfg.mlp_ratio as u64));
    visible as u64 * d * dd + blocks + targets as u64 * dd * d
}

fn decoder_reference_plan(grid: &TokenGrid) -> Result<crate::maskplan::MaskPlan> {
    random_mask(grid, 0.5, 0)
}

/// Closed-form MAC count of the encode path (plus the decoder, reported separately).
pub fn count_macs(cfg: &ModelConfig, registry: &ModalityRegistry, dims: Dims, scheme: BandsetScheme) -> Result<MacsReport> {
    let cfg = ModelConfig { scheme, ..cfg.clone() };
    cfg.validate()?;
    let grid = TokenGrid::new(registry, dims, cfg.patch_size, scheme)?;
    let pp = (cfg.patch_size * cfg.patch_size) as u64;
    let (d, h) = (cfg.width as u64, cfg.hidden as u64);
    let mut projection = 0;
    let mut tokens: Vec<(String, usize)> = registry.specs().iter().filter(|s| s.role == Role::EncodeDecode).map(|s| (s.name.clone(), 0)).collect();
    for g in grid.groups().iter().filter(|g| g.role == Role::EncodeDecode) {
        let c = g.channels.len() as u64;
        let per_token = match cfg.projection {
            ProjectionMode::Linear => pp * c * d,
            ProjectionMode::Nonlinear => pp * c * h + pp * h * d,
        };
        projection += g.len as u64 * per_token;
        let name = &registry.specs()[g.modality].name;
        tokens.iter_mut().find(|(n, _)| n == name).expect("listed").1 += g.len;
    }
    let n: usize = tokens.iter().map(|(_, c)| c).sum();
    let depth = cfg.encoder_depth as u64;
    let encoder_attention = depth * attention_macs(n as u64, d);
    let encoder_mlp = depth * mlp_macs(n as u64, d, cfg.mlp_width() as u64);
    let plan = decoder_reference_plan(&grid)?;
    let decoder = decoder_macs(&cfg, plan.visible().len(), plan.targets().len());
    Ok(MacsReport {
        projection,
        encoder_attention,
        encoder_mlp,
        decoder,
        tokens,
        encoder_tokens: n,
        total: projection + encoder_attention + encoder_mlp + decoder,
    })
}

/// Counts MACs by running the model on a tape and reading its contraction tally:
/// `(projection, encoder blocks, decoder)`.
pub fn count_macs_instrumented(cfg: &ModelConfig, registry: &ModalityRegistry, dims: Dims, scheme: BandsetScheme) -> Result<(u64, u64, u64)> {
    let cfg = ModelConfig { scheme, ..cfg.clone() };
    let model = Model::<f32>::new(cfg, registry.clone(), 0)?;
    let grid = model.grid(dims)?;
    let scene = SceneGenerator::with_defaults(registry.clone()).generate_scene(dims, 0)?;
    let patches = patchify_on(&scene, registry, &grid)?;
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape, false)?;
    let tokens: Vec<usize> = (0..grid.len()).filter(|&i| grid.role_of(i) == Role::EncodeDecode).collect();
    let x = model.embed_tokens(&mut tape, &b, &grid, &patches, &tokens)?;
    let projection = tape.macs();
    model.encode_embedded(&mut tape, &b, x)?;
    let encoder = tape.macs() - projection;
    let plan = decoder_reference_plan(&grid)?;
    let mut tape = Tape::new();
    let b = model.store.bind(&mut tape, false)?;
    let latents = model.encode(&mut tape, &b, &grid, &patches, &plan.visible())?;
    let before = tape.macs();
    model.decode(&mut tape, &b, &grid, latents, &plan)?;
    Ok((projection, encoder, tape.macs() - before))
}

/// Row-major feature matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub x: Vec<f32>,
    pub d: usize,
    pub y: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn select(&self, rows: &[usize]) -> Features {
        Features { x: rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect(), d: self.d, y: rows.iter().map(|&r| self.y[r]).collect() }
    }

    fn check(&self) -> Result<()> {
        if self.d == 0 || self.x.len() != self.y.len() * self.d {
            return Err(Error::Config(format!("features: {} values for {} rows of width {}", self.x.len(), self.y.len(), self.d)));
        }
        Ok(())
    }
}

pub const KNN_K: usize = 20;

fn unit_rows(f: &Features) -> Vec<f64> {
    let mut out = Vec::with_capacity(f.x.len());
    for i in 0..f.len() {
        let r = f.row(i);
        let n = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
        out.extend(r.iter().map(|&v| v as f64 / n));
    }
    out
}

/// Majority vote over the `k` most cosine-similar references. Ties between
/// classes go to the tied class of the nearest neighbor.
fn knn_vote(sims: &mut [(f64, usize)], labels: &[usize], k: usize) -> usize {
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let top = &sims[..k];
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let mut votes = vec![0usize; classes];
    for &(_, j) in top {
        votes[labels[j]] += 1;
    }
    let best = *votes.iter().max().expect("nonempty");
    top.iter().map(|&(_, j)| labels[j]).find(|&c| votes[c] == best).expect("winner among neighbors")
}

/// kNN predictions for `queries` against the labelled `reference` set.
pub fn knn_predict(reference: &Features, queries: &Features, k: usize) -> Result<Vec<usize>> {
    reference.check()?;
    queries.check()?;
    if k == 0 || k >= reference.len() {
        return Err(Error::Config(format!("kNN needs 1 <= k < n, got k = {k}, n = {}", reference.len())));
    }
    let (r, q, d) = (unit_rows(reference), unit_rows(queries), reference.d);
    Ok((0..queries.len())
        .map(|i| {
            let qi = &q[i * d..(i + 1) * d];
            let mut sims: Vec<(f64, usize)> = (0..reference.len()).map(|j| (qi.iter().zip(&r[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum(), j)).collect();
            knn_vote(&mut sims, &reference.y, k)
        })
        .collect())
}

/// Leave-one-out kNN accuracy over cosine neighbors.
pub fn knn_probe(emb: &Features, k: usize) -> Result<f64> {
    emb.check()?;
    let n = emb.len();
    if k == 0 || k >= n {
        return Err(Error::Config(format!("kNN needs 1 <= k < n, got k = {k}, n = {n}")));
    }
    let (u, d) = (unit_rows(emb), emb.d);
    let correct = (0..n)
        .filter(|&i| {
            let qi = &u[i * d..(i + 1) * d];
            let mut sims: Vec<(f64, usize)> =
                (0..n).filter(|&j| j != i).map(|j| (qi.iter().zip(&u[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum(), j)).collect();
            knn_vote(&mut sims, &emb.y, k) == emb.y[i]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

/// Shuffled 60/20/20 train/validation/test split of `0..n`.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed, &[0x5B117]));
    let n_train = n * 3 / 5;
    let n_val = n / 5;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    (idx, val, test)
}

/// Mean intersection-over-union over classes present in `truth` or `pred`.
pub fn miou(truth: &[usize], pred: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(pred) {
        union[t] += 1;
        if t == p {
            inter[t] += 1;
        } else {
            union[p] += 1;
        }
    }
    let present: Vec<f64> = (0..classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().sum::<f64>() / present.len() as f64
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Accuracy,
    #[serde(rename = "mIOU")]
    MIou,
}

impl Metric {
    pub fn for_task(kind: TaskKind) -> Self {
        if kind == TaskKind::PatchSeg {
            Metric::MIou
        } else {
            Metric::Accuracy
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::MIou => "mIOU",
        }
    }

    pub fn score(self, truth: &[usize], pred: &[usize], classes: usize) -> f64 {
        match self {
            Metric::Accuracy => accuracy(truth, pred),
            Metric::MIou => miou(truth, pred, classes),
        }
    }
}

/// Affine softmax classifier on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    mean: Vec<f64>,
    std: Vec<f64>,
    /// `[d + 1, classes]`, bias row last.
    w: Vec<f64>,
    classes: usize,
}

impl LinearHead {
    /// Full-batch gradient descent on mean cross-entropy from a zero init.
    pub fn fit(train: &Features, classes: usize, lr: f64, iterations: usize) -> Result<Self> {
        train.check()?;
        if train.is_empty() {
            return Err(Error::Config("linear probe needs training rows".into()));
        }
        let (n, d) = (train.len(), train.d);
        let mut mean = vec![0.0; d];
        let mut std = vec![0.0; d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(train.row(i)) {
                *m += v as f64 / n as f64;
            }
        }
        for i in 0..n {
            for ((s, m), &v) in std.iter_mut().zip(&mean).zip(train.row(i)) {
                *s += (v as f64 - m).powi(2) / n as f64;
            }
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-6));
        let mut head = Self { mean, std, w: vec![0.0; (d + 1) * classes], classes };
        let xs: Vec<Vec<f64>> = (0..n).map(|i| head.standardize(train.row(i))).collect();
        let mut grad = vec![0.0; head.w.len()];
        for _ in 0..iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for (x, &y) in xs.iter().zip(&train.y) {
                let p = softmax(&head.logits_std(x));
                for c in 0..classes {
                    let e = (p[c] - f64::from(u8::from(c == y))) / n as f64;
                    for (k, xk) in x.iter().enumerate() {
                        grad[k * classes + c] += e * xk;
                    }
                    grad[d * classes + c] += e;
                }
            }
            head.w.iter_mut().zip(&grad).for_each(|(w, g)| *w -= lr * g);
        }
        Ok(head)
    }

    fn standardize(&self, row: &[f32]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((&v, m), s)| (v as f64 - m) / s).collect()
    }

    fn logits_std(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        (0..self.classes).map(|c| self.w[d * self.classes + c] + x.iter().enumerate().map(|(k, xk)| xk * self.w[k * self.classes + c]).sum::<f64>()).collect()
    }

    pub fn predict(&self, f: &Features) -> Vec<usize> {
        (0..f.len())
            .map(|i| {
                let l = self.logits_std(&self.standardize(f.row(i)));
                (0..self.classes).fold(0, |best, c| if l[c] > l[best] { c } else { best })
            })
            .collect()
    }
}

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinearProbeResult {
    /// `(lr, val, test)` per grid point.
    pub per_lr: Vec<(f64, f64, f64)>,
    pub best_lr: f64,
    pub test: f64,
}

/// Trains one head per learning rate and returns the test metric of the
/// best validation configuration.
pub fn linear_probe(
    train: &Features,
    val: &Features,
    test: &Features,
    classes: usize,
    metric: Metric,
    lr_grid: &[f64],
    iterations: usize,
) -> Result<LinearProbeResult> {
    if lr_grid.is_empty() {
        return Err(Error::Config("linear probe: empty learning-rate grid".into()));
    }
    let mut per_lr = Vec::with_capacity(lr_grid.len());
    for &lr in lr_grid {
        let head = LinearHead::fit(train, classes, lr, iterations)?;
        per_lr.push((lr, metric.score(&val.y, &head.predict(val), classes), metric.score(&test.y, &head.predict(test), classes)));
    }
    let best = per_lr.iter().enumerate().fold(0, |b, (i, r)| if r.1 > per_lr[b].1 { i } else { b });
    Ok(LinearProbeResult { best_lr: per_lr[best].0, test: per_lr[best].2, per_lr })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pooling {
    Mean,
    Max,
}

/// Input normalization for probing: the pretraining (generator) statistics
/// as-is, or per-band statistics of the probe dataset itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Normalization {
    Pretrain,
    Dataset,
}

/// Re-standardizes every observation band with statistics pooled over `scenes`.
pub fn dataset_normalize(scenes: &mut [Scene], registry: &ModalityRegistry) {
    for (m, spec) in registry.specs().iter().enumerate() {
        if spec.is_map() {
            continue;
        }
        let c = spec.bands;
        let (mut sum, mut sq, mut n) = (vec![0.0f64; c], vec![0.0f64; c], 0usize);
        for s in scenes.iter() {
            for px in s.arrays[m].data.chunks(c) {
                for (b, &v) in px.iter().enumerate() {
                    sum[b] += v as f64;
                    sq[b] += (v as f64).powi(2);
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        let std: Vec<f64> = sq.iter().zip(&mean).map(|(q, m)| (q / n.max(1) as f64 - m * m).max(0.0).sqrt().max(1e-6)).collect();
        for s in scenes.iter_mut() {
            for px in s.arrays[m].data.chunks_mut(c) {
                for (b, v) in px.iter_mut().enumerate() {
                    *v = ((*v as f64 - mean[b]) / std[b]) as f32;
                }
            }
        }
    }
}

/// Frozen-encoder features: one row per scene, or one row per spatial patch
/// for PatchSeg. `sample[r]` is the scene index of row `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub features: Features,
    pub sample: Vec<usize>,
}

impl Embedded {
    pub fn rows_of(&self, samples: &[usize]) -> Features {
        let mut keep = vec![false; self.sample.iter().max().map_or(0, |m| m + 1)];
        samples.iter().for_each(|&s| keep[s] = true);
        let rows: Vec<usize> = (0..self.sample.len()).filter(|&r| keep[self.sample[r]]).collect();
        self.features.select(&rows)
    }
}

fn pool_rows(z: &[f32], d: usize, rows: &[usize], pooling: Pooling) -> Vec<f32> {
    let mut out = vec![if pooling == Pooling::Max { f32::NEG_INFINITY } else { 0.0 }; d];
    for &r in rows {
        for (o, &v) in out.iter_mut().zip(&z[r * d..(r + 1) * d]) {
            match pooling {
                Pooling::Mean => *o += v / rows.len() as f32,
                Pooling::Max => *o = o.max(v),
            }
        }
    }
    out
}

pub fn embed_dataset(model: &Model<f32>, dataset: &LabeledDataset, pooling: Pooling, normalization: Normalization) -> Result<Embedded> {
    let grid = model.grid(dataset.dims)?;
    let mut scenes: Vec<Scene> = dataset.items.iter().map(|(s, _)| s.clone()).collect();
    if normalization == Normalization::Dataset {
        dataset_normalize(&mut scenes, &model.registry);
    }
    let d = model.cfg.width;
    let (mut x, mut y, mut sample) = (Vec::new(), Vec::new(), Vec::new());
    for (s, (scene, (_, label))) in scenes.iter().zip(&dataset.items).enumerate() {
        let patches = patchify_on(scene, &model.registry, &grid)?;
        let mut tape = Tape::new();
        let b = model.store.bind(&mut tape, false)?;
        let (z, tokens) = model.encode_all(&mut tape, &b, &grid, &patches)?;
        let z = tape.value(z);
        match label {
            Label::Class(c) => {
                x.extend(pool_rows(z, d, &(0..tokens.len()).collect::<Vec<_>>(), pooling));
                y.push(*c);
                sample.push(s);
            }
            Label::Segmentation(cells) => {
                let mut by_cell = vec![Vec::new(); grid.hp * grid.wp];
                for (r, &t) in tokens.iter().enumerate() {
                    let rec = grid.token(t);
                    by_cell[rec.i * grid.wp + rec.j].push(r);
                }
                for (cell, rows) in by_cell.iter().enumerate() {
                    x.extend(pool_rows(z, d, rows, pooling));
                    y.push(cells[cell]);
                    sample.push(s);
                }
            }
        }
    }
    Ok(Embedded { features: Features { x, d, y }, sample })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbeMethod {
    Knn,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub method: ProbeMethod,
    pub k: usize,
    pub poolings: Vec<Pooling>,
    pub normalizations: Vec<Normalization>,
    pub lr_grid: Vec<f64>,
    pub iterations: usize,
}

impl ProbeConfig {
    /// kNN for single-timestep scene classification, linear probing elsewhere.
    pub fn for_task(kind: TaskKind) -> Self {
        Self {
            method: if kind == TaskKind::SceneClass { ProbeMethod::Knn } else { ProbeMethod::Linear },
            k: KNN_K,
            poolings: vec![Pooling::Mean, Pooling::Max],
            normalizations: vec![Normalization::Pretrain, Normalization::Dataset],
            lr_grid: vec![0.03, 0.1, 0.3, 1.0],
            iterations: 200,
        }
    }

    /// A single (Pretrain, Mean) cell with one learning rate.
    pub fn quick(kind: TaskKind) -> Self {
        Self { poolings: vec![Pooling::Mean], normalizations: vec![Normalization::Pretrain], lr_grid: vec![0.3], ..Self::for_task(kind) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.poolings.is_empty() || self.normalizations.is_empty() || self.lr_grid.is_empty() || self.iterations == 0 {
            return Err(Error::Config("probe: k and iterations must be positive and every grid nonempty".into()));
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0)) {
            return Err(Error::Config("probe.lr_grid: learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeCell {
    pub normalization: Normalization,
    pub pooling: Pooling,
    pub lr: Option<f64>,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub task: TaskKind,
    pub method: ProbeMethod,
    pub metric: Metric,
    pub cells: Vec<ProbeCell>,
    /// Index of the best validation cell.
    pub best: usize,
    pub test: f64,
}

/// Evaluates every (normalization × pooling × lr) cell on a 60/20/20 split
/// by scene and reports the test metric of the best validation cell.
pub fn probe_sweep(model: &Model<f32>, dataset: &LabeledDataset, cfg: &ProbeConfig, seed: u64) -> Result<ProbeReport> {
    cfg.validate()?;
    let metric = Metric::for_task(dataset.kind);
    let (train, val, test) = split_indices(dataset.len(), seed);
    let mut cells = Vec::new();
    for &normalization in &cfg.normalizations {
        for &pooling in &cfg.poolings {
            let emb = embed_dataset(model, dataset, pooling, normalization)?;
            let (tr, va, te) = (emb.rows_of(&train), emb.rows_of(&val), emb.rows_of(&test));
            match cfg.method {
                ProbeMethod::Knn => {
                    let val = metric.score(&va.y, &knn_predict(&tr, &va, cfg.k)?, dataset.num_classes);
                    let test = metric.score(&te.y, &knn_predict(&tr, &te, cfg.k)?, dataset.num_classes);
                    cells.push(ProbeCell { normalization, pooling, lr: None, val, test });
                }
                ProbeMethod::Linear => {
                    let r = linear_probe(&tr, &va, &te, dataset.num_classes, metric, &cfg.lr_grid, cfg.iterations)?;
                    cells.extend(r.per_lr.into_iter().map(|(lr, val, test)| ProbeCell { normalization, pooling, lr: Some(lr), val, test }));
                }
            }
        }
    }
    let best = cells.iter().enumerate().fold(0, |b, (i, c)| if c.val > cells[b].val { i } else { b });
    Ok(ProbeReport { task: dataset.kind, method: cfg.method, metric, test: cells[best].test, best, cells })
}

/// Which synthetic tasks to probe after pretraining, and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPlan {
    pub tasks: Vec<TaskKind>,
    pub samples: usize,
    pub seed: u64,
    /// Full probe sweep per task instead of the single quick cell.
    #[serde(default)]
    pub sweep: bool,
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self { tasks: TaskKind::ALL.to_vec(), samples: 100, seed: 1234, sweep: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScore {
    pub task: TaskKind,
    pub metric: Metric,
    pub value: f64,
}

pub fn task_dataset(cfg: &RunConfig, kind: TaskKind, samples: usize, seed: u64) -> Result<LabeledDataset> {
    let gen = SceneGenerator::new(cfg.data.registry()?, cfg.data.generator.clone())?;
    gen.generate_task_dataset(kind, samples, cfg.data.dims(), cfg.model_config().patch_size, seed)
}

pub fn evaluate_model(model: &Model<f32>, cfg: &RunConfig, plan: &EvalPlan) -> Result<Vec<TaskScore>> {
    plan.tasks
        .iter()
        .map(|&kind| {
            let ds = task_dataset(cfg, kind, plan.samples, plan.seed)?;
            let probe = if plan.sweep { ProbeConfig::for_task(kind) } else { ProbeConfig::quick(kind) };
            let r = probe_sweep(model, &ds, &probe, plan.seed)?;
            Ok(TaskScore { task: kind, metric: r.metric, value: r.test })
        })
        .collect()
}

pub const INITIAL_WINDOW: usize = 10;

/// Mean total loss over the last tenth of the run.
pub fn smoothed_final_loss(metrics: &[StepMetrics]) -> f64 {
    let w = (metrics.len() / 10).max(1);
    let tail = &metrics[metrics.len().saturating_sub(w)..];
    tail.iter().map(|m| m.loss_total).sum::<f64>() / tail.len().max(1) as f64
}

/// Mean total loss over the first `INITIAL_WINDOW` steps, i.e. the loss at
/// initialization with batch noise averaged out.
pub fn smoothed_initial_loss(metrics: &[StepMetrics]) -> f64 {
    let w = INITIAL_WINDOW.min(metrics.len());
    metrics[..w].iter().map(|m| m.loss_total).sum::<f64>() / w.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub masking: MaskingStrategy,
    pub r_max: f64,
    pub projection: ProjectionMode,
    pub loss: LossVariant,
}

impl AblationRow {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.name = format!("{}-{}", base.name, self.label.replace(' ', "_"));
        cfg.masking.strategy = self.masking;
        cfg.r_max = self.r_max;
        cfg.projection = self.projection;
        cfg.loss.variant = self.loss;
        cfg
    }
}

/// The updated recipe followed by one row per reverted component.
pub fn table3_rows() -> Vec<AblationRow> {
    let updated = AblationRow {
        label: "updated".into(),
        masking: MaskingStrategy::V11,
        r_max: 0.2,
        projection: ProjectionMode::Nonlinear,
        loss: LossVariant::MaskedNegatives,
    };
    vec![
        updated.clone(),
        AblationRow { label: "v1 masking".into(), masking: MaskingStrategy::V1, ..updated.clone() },
        AblationRow { label: "r_max 0".into(), r_max: 0.0, ..updated.clone() },
        AblationRow { label: "linear projection".into(), projection: ProjectionMode::Linear, ..updated.clone() },
        AblationRow { label: "v1 loss".into(), loss: LossVariant::V1, ..updated },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub final_loss: f64,
    pub scores: Vec<TaskScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationResult>,
}

impl AblationReport {
    /// Plain-text table: one line per row, one column per task.
    pub fn to_table(&self) -> String {
        let mut s = String::from("| masking | r_max | projection | loss |");
        if let Some(first) = self.rows.first() {
            for t in &first.scores {
                write!(s, " {} ({}) |", t.task.name(), t.metric.name()).unwrap();
            }
        }
        s.push('\n');
        for r in &self.rows {
            let masking = if r.row.masking == MaskingStrategy::V11 { "updated" } else { "v1" };
            let loss = if r.row.loss == LossVariant::MaskedNegatives { "masked negatives" } else { "v1" };
            write!(s, "| {masking} | {} | {:?} | {loss} |", r.row.r_max, r.row.projection).unwrap();
            for t in &r.scores {
                write!(s, " {:.4} |", t.value).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

fn pretrain_and_probe(cfg: &RunConfig, plan: &EvalPlan) -> Result<(f64, Vec<TaskScore>)> {
    let run = pretrain(cfg, None)?;
    let scores = evaluate_model(&run.model, cfg, plan)?;
    Ok((smoothed_final_loss(&run.metrics), scores))
}

/// One pretrain + probe per row, all sharing the base seed.
pub fn run_ablation_suite(base: &RunConfig, rows: &[AblationRow], plan: &EvalPlan) -> Result<AblationReport> {
    let results = fan_out(rows, thread_budget(), |row| pretrain_and_probe(&row.apply(base), plan));
    let rows = rows
        .iter()
        .zip(results)
        .map(|(row, r)| r.map(|(final_loss, scores)| AblationResult { row: row.clone(), final_loss, scores }))
        .collect::<Result<_>>()?;
    Ok(AblationReport { rows })
}

pub const DEFAULT_PT_GRID: [f64; 4] = [0.0, 0.25, 0.5, 0.75];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub p_t: f64,
    pub task: TaskKind,
    pub metric: Metric,
    pub value: f64,
    pub final_loss: f64,
}

pub fn sweep_pt(values: &[f64], base: &RunConfig, plan: &EvalPlan) -> Result<Vec<SweepRow>> {
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Config(format!("p_t value {bad} outside [0, 1]")));
    }
    let results = fan_out(values, thread_budget(), |&p_t| {
        let mut cfg = base.clone();
        cfg.name = format!("{}-pt{p_t}", base.name);
        cfg.masking.p_t = p_t;
        pretrain_and_probe(&cfg, plan)
    });
    let mut rows = Vec::new();
    for (&p_t, r) in values.iter().zip(results) {
        let (final_loss, scores) = r?;
        rows.extend(scores.into_iter().map(|s| SweepRow { p_t, task: s.task, metric: s.metric, value: s.value, final_loss }));
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("p_t,task,metric,value,final_loss\n");
    for r in rows {
        writeln!(s, "{},{},{},{:.6},{:.6}", r.p_t, r.task.name(), r.metric.name(), r.value, r.final_loss).unwrap();
    }
    s
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub reps: usize,
    pub tokens: usize,
    pub max_abs_diff: f64,
    pub conv_median_ms: f64,
    pub linear_median_ms: f64,
    /// conv time over linear time.
    pub speedup: f64,
    pub conv_tokens_per_s: f64,
    pub linear_tokens_per_s: f64,
}

/// Reshape into `[Hp·Wp, C·P·P]` rows and multiply by the reshaped weight.
fn reshape_affine(lin: &[f32], pixels: &[f32], (d, c, p): (usize, usize, usize), (h, w): (usize, usize)) -> Vec<f32> {
    let (hp, wp, k) = (h / p, w / p, c * p * p);
    let mut rows = vec![0.0f32; hp * wp * k];
    for i in 0..hp {
        for j in 0..wp {
            let row = &mut rows[(i * wp + j) * k..(i * wp + j + 1) * k];
            for ch in 0..c {
                for u in 0..p {
                    let src = (ch * h + i * p + u) * w + j * p;
                    row[(ch * p + u) * p..(ch * p + u + 1) * p].copy_from_slice(&pixels[src..src + p]);
                }
            }
        }
    }
    let mut out = vec![0.0f32; hp * wp * d];
    kernels::gemm_nn(&rows, lin, &mut out, hp * wp, k, d);
    out
}

/// Times the strided-convolution reference against reshape + affine on
/// identical inputs, after checking they agree to 1e-5.
pub fn bench_patch_embed(c: usize, (h, w): (usize, usize), p: usize, d: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps < 10 {
        return Err(Error::Bench(format!("need at least 10 repetitions, got {reps}")));
    }
    if c == 0 || h == 0 || w == 0 || p == 0 || d == 0 {
        return Err(Error::Bench("zero-size input".into()));
    }
    if h % p != 0 || w % p != 0 {
        return Err(Error::Bench(format!("{h}x{w} is not divisible by patch size {p}")));
    }
    let mut rng = seed::rng(seed, &[0xBE4C]);
    let weight: Vec<f32> = (0..d * c * p * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let pixels: Vec<f32> = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
    let lin = conv_weight_to_linear(&weight, (d, c, p));
    let conv = conv_patch_embed_reference(&weight, &pixels, (d, c, p), (h, w))?;
    let fast = reshape_affine(&lin, &pixels, (d, c, p), (h, w));
    let tokens = (h / p) * (w / p);
    // conv output is [D, Hp, Wp]; reshape output is [Hp·Wp, D]
    let mut max_abs_diff = 0.0f64;
    for o in 0..d {
        for t in 0..tokens {
            max_abs_diff = max_abs_diff.max((conv[o * tokens + t] - fast[t * d + o]).abs() as f64);
        }
    }
    if !(max_abs_diff <= 1e-5) {
        return Err(Error::Bench(format!("implementations disagree: max |diff| = {max_abs_diff:e}")));
    }
    let time = |f: &dyn Fn() -> Vec<f32>| -> f64 {
        let samples: Vec<f64> = (0..reps)
            .map(|_| {
                let t0 = Instant::now();
                std::hint::black_box(f());
                t0.elapsed().as_secs_f64() * 1e3
            })
            .collect();
        median(&samples)
    };
    let conv_median_ms = time(&|| conv_patch_embed_reference(&weight, &pixels, (d, c, p), (h, w)).expect("checked"));
    let linear_median_ms = time(&|| reshape_affine(&lin, &pixels, (d, c, p), (h, w)));
    let rate = |ms: f64| tokens as f64 / (ms.max(1e-9) / 1e3);
    Ok(BenchReport {
        channels: c,
        height: h,
        width: w,
        patch: p,
        dim: d,
        reps,
        tokens,
        max_abs_diff,
        conv_median_ms,
        linear_median_ms,
        speedup: conv_median_ms / linear_median_ms.max(1e-12),
        conv_tokens_per_s: rate(conv_median_ms),
        linear_tokens_per_s: rate(linear_median_ms),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradNormRun {
    pub projection: ProjectionMode,
    pub grad_norms: Vec<f64>,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradNormReport {
    pub runs: Vec<GradNormRun>,
}

impl GradNormReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step");
        for r in &self.runs {
            write!(s, ",{:?}", r.projection).unwrap();
        }
        s.push('\n');
        let steps = self.runs.iter().map(|r| r.grad_norms.len()).max().unwrap_or(0);
        for i in 0..steps {
            write!(s, "{}", i + 1).unwrap();
            for r in &self.runs {
                match r.grad_norms.get(i) {
                    Some(g) => write!(s, ",{g:.6e}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Paired runs differing only in the projection mode.
pub fn grad_norm_comparison(base: &RunConfig) -> Result<GradNormReport> {
    let modes = [ProjectionMode::Linear, ProjectionMode::Nonlinear];
    let results = fan_out(&modes, thread_budget(), |&projection| {
        let cfg = RunConfig { projection, name: format!("{}-{projection:?}", base.name), ..base.clone() };
        pretrain(&cfg, None)
    });
    let runs = modes
        .iter()
        .zip(results)
        .map(|(&projection, r)| {
            let grad_norms: Vec<f64> = r?.metrics.iter().map(|m| m.grad_norm).collect();
            Ok(GradNormRun { projection, median: median(&grad_norms), max: grad_norms.iter().copied().fold(f64::NEG_INFINITY, f64::max), grad_norms })
        })
        .collect::<Result<_>>()?;
    Ok(GradNormReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::default_registry;
    use crate::model::Preset;

    #[test]
    fn split_partitions_every_index() {
        let (a, b, c) = split_indices(23, 4);
        assert_eq!((a.len(), b.len(), c.len()), (13, 4, 6));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn doubling_tokens_quadruples_attention_term() {
        let (n, d) = (10u64, 8u64);
        let quad = attention_macs(2 * n, d) - 2 * 4 * (2 * n) * d * d / 2;
        assert_eq!(quad, 4 * (2 * n * n * d));
        assert_eq!(mlp_macs(2 * n, d, 32), 2 * mlp_macs(n, d, 32));
    }

    #[test]
    fn zero_depth_encoder_costs_projection_only() {
        let mut cfg = ModelConfig::preset(Preset::Nano);
        cfg.encoder_depth = 0;
        let reg = default_registry().subset(&["S2"]).unwrap();
        let r = count_macs(&cfg, &reg, Dims::new(2, 8, 8), BandsetScheme::SingleBandset).unwrap();
        assert_eq!(r.encode(), r.projection);
        assert_eq!(r.total, r.projection + r.decoder);
    }

    #[test]
    fn closed_form_matches_instrumented_count() {
        let reg = default_registry().subset(&["S1", "S2", "WorldCover"]).unwrap();
        for preset in [Preset::Nano, Preset::Tiny, Preset::Base] {
            for mode in [ProjectionMode::Linear, ProjectionMode::Nonlinear] {
                let cfg = ModelConfig { projection: mode, ..ModelConfig::preset(preset) };
                for scheme in [BandsetScheme::SingleBandset, BandsetScheme::MultiBandset] {
                    let r = count_macs(&cfg, &reg, Dims::new(2, 8, 8), scheme).unwrap();
                    let (p, e, dec) = count_macs_instrumented(&cfg, &reg, Dims::new(2, 8, 8), scheme).unwrap();
                    assert_eq!((r.projection, r.encoder_attention + r.encoder_mlp, r.decoder), (p, e, dec), "{preset:?} {mode:?} {scheme:?}");
                }
            }
        }
    }

    #[test]
    fn miou_by_definition() {
        assert_eq!(miou(&[0, 1, 2, 3], &[0, 1, 2, 3], 4), 1.0);
        // balanced 4-class truth, everything predicted as class 0
        let truth: Vec<usize> = (0..16).map(|i| i % 4).collect();
        let pred = vec![0; 16];
        // class 0: 4 / 16; classes 1..3: 0 / 4
        assert!((miou(&truth, &pred, 4) - 0.25 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn knn_tie_goes_to_nearest_neighbors_class() {
        let reference = Features { x: vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0], d: 2, y: vec![0, 1, 0] };
        // k = 2: one vote each; the nearer neighbor decides
        let q = Features { x: vec![1.0, 0.9, 0.9, 1.0], d: 2, y: vec![0, 1] };
        assert_eq!(knn_predict(&reference, &q, 2).unwrap(), vec![0, 1]);
        assert!(knn_predict(&reference, &q, 3).is_err());
    }

    #[test]
    fn knn_rejects_k_not_below_n() {
        let f = Features { x: vec![1.0, 0.0, 0.0, 1.0], d: 2, y: vec![0, 1] };
        assert!(knn_probe(&f, 2).is_err());
        assert!(knn_probe(&f, 0).is_err());
    }

    #[test]
    fn linear_probe_needs_a_grid() {
        let f = Features { x: vec![1.0, 0.0, 0.0, 1.0], d: 2, y: vec![0, 1] };
        assert!(linear_probe(&f, &f, &f, 2, Metric::Accuracy, &[], 10).is_err());
    }

    #[test]
    fn bench_rejects_bad_arguments() {
        assert!(bench_patch_embed(2, (8, 8), 4, 16, 9, 0).is_err());
        assert!(bench_patch_embed(0, (8, 8), 4, 16, 10, 0).is_err());
        let r = bench_patch_embed(2, (8, 8), 4, 16, 10, 0).unwrap();
        assert!(r.max_abs_diff <= 1e-5 && r.speedup > 0.0);
    }

    #[test]
    fn table3_has_five_rows_each_reverting_one_component() {
        let rows = table3_rows();
        assert_eq!(rows.len(), 5);
        let base = &rows[0];
        for r in &rows[1..] {
            let diffs = [r.masking != base.masking, r.r_max != base.r_max, r.projection != base.projection, r.loss != base.loss];
            assert_eq!(diffs.iter().filter(|&&d| d).count(), 1, "{}", r.label);
        }
    }
}

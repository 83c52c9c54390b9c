//! Pretraining and finetuning loops: AdamW, warmup + cosine schedule,
//! gradient-norm telemetry, and the FrozenStart / LLRD parameter groups.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::datagen::{Label, LabeledDataset, SceneGenerator, TaskKind};
use crate::error::{Error, Result};
use crate::evalkit::{miou, split_indices};
use crate::losses::two_view_loss;
use crate::model::{Model, ViewSettings};
use crate::numerics::{Scalar, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::seed;
use crate::tokenize::{patchify_on, PatchArray, TokenGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Floor of the cosine as a fraction of `peak_lr`.
    pub final_lr_fraction: f64,
    pub batch_size: usize,
    pub micro_batch_size: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { total_steps: 1000, warmup_steps: 100, peak_lr: 1e-3, final_lr_fraction: 0.1, batch_size: 16, micro_batch_size: 16 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("schedule.{m}")));
        if self.total_steps == 0 {
            return bad("total_steps: must be positive".into());
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!("warmup_steps: {} must be below total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.peak_lr > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad("peak_lr must be positive and final_lr_fraction in [0, 1]".into());
        }
        if self.micro_batch_size == 0 || !self.batch_size.is_multiple_of(self.micro_batch_size) {
            return bad(format!("micro_batch_size: {} must divide batch_size {}", self.micro_batch_size, self.batch_size));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then cosine annealing down to
/// `final_lr_fraction · peak_lr` at `total_steps`.
pub fn lr_at(step: usize, s: &ScheduleConfig) -> f64 {
    let step = step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    let f = s.final_lr_fraction;
    s.peak_lr * (f + (1.0 - f) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm clip; off by default so telemetry sees raw norms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, grad_clip: None }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0 && self.weight_decay >= 0.0;
        if !ok || self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("optimizer: betas must lie in [0, 1), eps > 0, weight_decay >= 0, grad_clip > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// AdamW with decoupled weight decay. Moment buffers are created the first
/// time a parameter is updated with a nonzero learning rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    state: Vec<Option<Moments>>,
}

/// Per-parameter gradients in store order; `None` where nothing flowed.
pub type Grads = Vec<Option<Vec<f64>>>;

pub fn grad_norm(grads: &Grads) -> f64 {
    grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Self {
        Self { cfg, state: vec![None; n_params] }
    }

    pub fn has_state(&self, id: ParamId) -> bool {
        self.state.get(id.0).is_some_and(Option::is_some)
    }

    /// One update. `lr(id)` gives each parameter's learning rate; a rate of
    /// exactly 0 leaves the parameter and its optimizer state untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &Grads, lr: impl Fn(ParamId) -> f64) {
        let scale = match self.cfg.grad_clip {
            Some(c) => {
                let n = grad_norm(grads);
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2, eps, wd) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay);
        for (id, p) in store.iter_mut() {
            let Some(g) = grads.get(id.0).and_then(Option::as_ref) else { continue };
            let rate = lr(id);
            if rate == 0.0 {
                continue;
            }
            let st = self.state[id.0].get_or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()], t: 0 });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t);
            let c2 = 1.0 - b2.powi(st.t);
            for i in 0..g.len() {
                let gi = g[i] * scale;
                st.m[i] = b1 * st.m[i] + (1.0 - b1) * gi;
                st.v[i] = b2 * st.v[i] + (1.0 - b2) * gi * gi;
                let mut x = p.data[i].as_f64();
                if p.decay {
                    x -= rate * wd * x;
                }
                x -= rate * (st.m[i] / c1) / ((st.v[i] / c2).sqrt() + eps);
                p.data[i] = T::of(x);
            }
        }
    }
}

/// Reads every bound parameter's gradient off the tape.
pub fn collect_grads<T: Scalar>(tape: &Tape<T>, bound: &Bound) -> Grads {
    bound.vars().iter().map(|&v| tape.grad(v).map(|g| g.iter().map(|x| x.as_f64()).collect())).collect()
}

/// `acc += w · g`, elementwise.
fn accumulate(acc: &mut Grads, g: Grads, w: f64) {
    for (a, g) in acc.iter_mut().zip(g) {
        let Some(g) = g else { continue };
        match a {
            Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += w * y),
            None => *a = Some(g.into_iter().map(|y| w * y).collect()),
        }
    }
}

/// Worker threads for micro-batch fan-out: `OE_LAB_THREADS` if set, else the
/// available parallelism.
pub fn thread_budget() -> usize {
    std::env::var("OE_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `items`, at most `threads` at a time, returning results in input order.
pub fn fan_out<I: Sync, R: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(threads) {
        let results: Vec<R> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
            handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
        });
        out.extend(results);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_token: f64,
    pub loss_inst: f64,
    pub loss_total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wallclock_ms: f64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    pub model: Model<f32>,
}

struct MicroResult {
    grads: Grads,
    token: f64,
    inst: f64,
    total: f64,
}

fn micro_step(model: &Model<f32>, grid: &TokenGrid, batch: &[PatchArray], views: &ViewSettings, cfg: &RunConfig, step_seed: u64) -> Result<MicroResult> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape, true)?;
    let out = model.forward_two_views(&mut tape, &bound, grid, batch, views, step_seed)?;
    let parts = two_view_loss(&mut tape, &out, &cfg.loss)?;
    tape.backward(parts.total)?;
    Ok(MicroResult {
        grads: collect_grads(&tape, &bound),
        token: tape.scalar(parts.token).as_f64(),
        inst: tape.scalar(parts.instance).as_f64(),
        total: tape.scalar(parts.total).as_f64(),
    })
}

/// Scenes of one pretraining step; each is drawn fresh from `(seed, step, index)`.
pub fn pretrain_batch(gen: &SceneGenerator, grid: &TokenGrid, cfg: &RunConfig, step: usize) -> Result<Vec<PatchArray>> {
    (0..cfg.schedule.batch_size)
        .map(|i| {
            let scene = gen.generate_scene(cfg.data.dims(), seed::derive(cfg.seed, &[0xDA7A, step as u64, i as u64]))?;
            patchify_on(&scene, gen.registry(), grid)
        })
        .collect()
}

pub fn checkpoint_of(model: &Model<f32>, step: usize, cfg: &RunConfig) -> Result<Checkpoint> {
    Checkpoint::from_stores(step, cfg, &[&model.store, &model.frozen.store])
}

/// Rebuilds a model from a checkpoint written by [`pretrain`].
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model<f32>, RunConfig)> {
    let cfg = ckpt.run_config()?;
    let mut model = Model::<f32>::new(cfg.model_config(), cfg.data.registry()?, cfg.seed)?;
    ckpt.restore_into(&mut model.store)?;
    ckpt.restore_into(&mut model.frozen.store)?;
    Ok((model, cfg))
}

/// Pretrains from scratch. With `out` set, writes `metrics.jsonl` and
/// checkpoints (`step_000000.ckpt` at initialization, every
/// `checkpoint_every` steps, and `final.ckpt`) under it.
pub fn pretrain(cfg: &RunConfig, out: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let registry = cfg.data.registry()?;
    let gen = SceneGenerator::new(registry.clone(), cfg.data.generator.clone())?;
    let mut model = Model::<f32>::new(cfg.model_config(), registry, cfg.seed)?;
    let grid = model.grid(cfg.data.dims())?;
    let views = ViewSettings { masking: cfg.masking.clone(), dropout: cfg.dropout(), same_seed_for_both_views: false };
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.store.len());
    let threads = thread_budget();
    let s = &cfg.schedule;
    let n_micro = s.batch_size / s.micro_batch_size;
    let w = 1.0 / n_micro as f64;

    let mut metrics_file = None;
    let mut checkpoints = Vec::new();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        metrics_file = Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?));
        let p = dir.join("step_000000.ckpt");
        checkpoint_of(&model, 0, cfg)?.save(&p)?;
        checkpoints.push(p);
    }
    let mut metrics = Vec::with_capacity(s.total_steps);
    for step in 0..s.total_steps {
        let t0 = Instant::now();
        let batch = pretrain_batch(&gen, &grid, cfg, step)?;
        let micro: Vec<(usize, &[PatchArray])> = batch.chunks(s.micro_batch_size).enumerate().collect();
        let results = fan_out(&micro, threads, |(m, mb)| micro_step(&model, &grid, mb, &views, cfg, seed::derive(cfg.seed, &[0x5EED, step as u64, *m as u64])));
        let mut grads: Grads = vec![None; model.store.len()];
        let (mut token, mut inst, mut total) = (0.0, 0.0, 0.0);
        for r in results {
            let r = r?;
            accumulate(&mut grads, r.grads, w);
            token += w * r.token;
            inst += w * r.inst;
            total += w * r.total;
        }
        let gnorm = grad_norm(&grads);
        let lr = lr_at(step + 1, s);
        let m = StepMetrics { step: step + 1, loss_token: token, loss_inst: inst, loss_total: total, grad_norm: gnorm, lr, wallclock_ms: 0.0 };
        if !total.is_finite() || !gnorm.is_finite() {
            if let Some(dir) = out {
                let p = dir.join("last_good.ckpt");
                checkpoint_of(&model, step, cfg)?.save(&p)?;
                let diag = serde_json::json!({ "step": step + 1, "metrics": serde_json::to_value(&m)?, "last_good_checkpoint": p });
                std::fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&diag)?)?;
            }
            log::error!("non-finite loss or gradient at step {}", step + 1);
            return Err(Error::NonFinite { what: if total.is_finite() { "gradient norm" } else { "loss" }, step: step + 1 });
        }
        opt.step(&mut model.store, &grads, |_| lr);
        let m = StepMetrics { wallclock_ms: t0.elapsed().as_secs_f64() * 1e3, ..m };
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
        }
        if m.step.is_multiple_of((s.total_steps / 10).max(1)) {
            log::info!("step {}/{} loss {:.4} (token {:.4}, inst {:.4}) |g| {:.3e} lr {:.2e}", m.step, s.total_steps, total, token, inst, gnorm, lr);
        } else {
            log::debug!("step {} loss {:.4} (token {:.4}, inst {:.4}) |g| {:.3e} lr {:.2e}", m.step, total, token, inst, gnorm, lr);
        }
        metrics.push(m);
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < s.total_steps {
                let p = dir.join(format!("step_{:06}.ckpt", step + 1));
                checkpoint_of(&model, step + 1, cfg)?.save(&p)?;
                checkpoints.push(p);
            }
        }
    }
    let mut metrics_path = None;
    if let Some(dir) = out {
        if let Some(mut f) = metrics_file {
            f.flush()?;
        }
        let p = dir.join("final.ckpt");
        checkpoint_of(&model, s.total_steps, cfg)?.save(&p)?;
        checkpoints.push(p);
        metrics_path = Some(dir.join("metrics.jsonl"));
    }
    Ok(RunArtifacts { metrics, checkpoints, metrics_path, model })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Recipe {
    /// Encoder frozen for the first 20% of epochs, then at a tenth of the base rate.
    FrozenStart,
    /// As FrozenStart, but the encoder runs at the base rate after unfreezing.
    FrozenStartUniform,
    /// Layer-wise decay 0.65 per encoder block towards the input.
    Llrd,
}

impl std::str::FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "frozenstart" | "frozen-start" => Ok(Recipe::FrozenStart),
            "frozenstartuniform" | "frozen-start-uniform" => Ok(Recipe::FrozenStartUniform),
            "llrd" => Ok(Recipe::Llrd),
            _ => Err(Error::Config(format!("unknown finetuning recipe `{s}` (expected FrozenStart, FrozenStartUniform or LLRD)"))),
        }
    }
}

pub const LLRD_DECAY: f64 = 0.65;
pub const FREEZE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub params: Vec<ParamId>,
    pub multiplier: f64,
    /// Fraction of the epochs during which the group's rate is 0.
    pub frozen_until: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroupPlan {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub groups: Vec<ParamGroup>,
}

impl ParamGroupPlan {
    pub fn group_of(&self, id: ParamId) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.params.contains(&id))
    }

    pub fn lr(&self, id: ParamId, epoch: usize) -> f64 {
        let Some(g) = self.group_of(id) else { return 0.0 };
        if (epoch as f64) < g.frozen_until * self.total_epochs as f64 {
            0.0
        } else {
            self.base_lr * g.multiplier
        }
    }
}

/// Splits the model's parameters into learning-rate groups. Encoder-side
/// parameters are the projections, token embeddings and encoder blocks;
/// everything else (decoder, task head) is the "decoder" group.
pub fn build_finetune_groups<T: Scalar>(model: &Model<T>, recipe: Recipe, base_lr: f64, total_epochs: usize) -> ParamGroupPlan {
    let ids: Vec<ParamId> = model.store.iter().map(|(id, _)| id).collect();
    let is_enc = |id: &ParamId| model.is_encoder_param(*id) && !model.store.get(*id).name.starts_with("enc.norm");
    let decoder: Vec<ParamId> = ids.iter().copied().filter(|id| !is_enc(id)).collect();
    let mut groups = Vec::new();
    match recipe {
        Recipe::FrozenStart | Recipe::FrozenStartUniform => {
            let factor = if recipe == Recipe::FrozenStart { 0.1 } else { 1.0 };
            groups.push(ParamGroup {
                name: "encoder".into(),
                params: ids.iter().copied().filter(is_enc).collect(),
                multiplier: factor,
                frozen_until: FREEZE_FRACTION,
            });
        }
        Recipe::Llrd => {
            let k_total = model.encoder.len() as i32;
            let embed: Vec<ParamId> = ids.iter().copied().filter(|id| is_enc(id) && model.encoder_block_of(*id).is_none()).collect();
            groups.push(ParamGroup { name: "embeddings".into(), params: embed, multiplier: LLRD_DECAY.powi(k_total + 1), frozen_until: 0.0 });
            for k in 0..model.encoder.len() {
                let params = ids.iter().copied().filter(|id| model.encoder_block_of(*id) == Some(k)).collect();
                // block k+1 of K (1-based) gets 0.65^(K-(k+1)+1)
                groups.push(ParamGroup { name: format!("block{}", k + 1), params, multiplier: LLRD_DECAY.powi(k_total - k as i32), frozen_until: 0.0 });
            }
        }
    }
    groups.push(ParamGroup { name: "decoder".into(), params: decoder, multiplier: 1.0, frozen_until: 0.0 });
    ParamGroupPlan { base_lr, total_epochs, groups }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 10, base_lr: 1e-3, batch_size: 16, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: f64,
    pub test: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneReport {
    pub task: TaskKind,
    /// Accuracy, or mIOU for PatchSeg.
    pub metric: &'static str,
    pub recipe: Recipe,
    pub initial_val: f64,
    pub initial_test: f64,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val: f64,
    pub test_at_best: f64,
}

/// Encoder plus a linear task head (`task.head.*` in the store).
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub model: Model<f32>,
    pub head: (ParamId, ParamId),
    pub kind: TaskKind,
}

impl TaskModel {
    pub fn new(mut model: Model<f32>, kind: TaskKind, classes: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed, &[0x4EAD]);
        let d = model.cfg.width;
        let head = (model.store.xavier("task.head.w", d, classes, &mut rng), model.store.zeros("task.head.b", &[classes], false));
        Self { model, head, kind }
    }

    /// Logits: `[1, classes]` for scene-level tasks, `[Hp·Wp, classes]` for PatchSeg.
    pub fn logits(&self, tape: &mut Tape<f32>, b: &Bound, grid: &TokenGrid, patches: &PatchArray) -> Result<Var> {
        let (z, tokens) = self.model.encode_all(tape, b, grid, patches)?;
        let feats = match self.kind {
            TaskKind::PatchSeg => {
                let avg = tape.constant(patch_average_matrix(grid, &tokens), &[grid.hp * grid.wp, tokens.len()])?;
                tape.matmul(avg, z)?
            }
            TaskKind::SceneClass | TaskKind::TemporalClass => tape.mean_rows(z)?,
        };
        Ok(tape.affine(feats, b[self.head.0], Some(b[self.head.1]))?)
    }
}

/// `[Hp·Wp, n]` matrix averaging the listed tokens per spatial patch.
pub fn patch_average_matrix<T: Scalar>(grid: &TokenGrid, tokens: &[usize]) -> Vec<T> {
    let cells = grid.hp * grid.wp;
    let mut counts = vec![0usize; cells];
    for &t in tokens {
        let r = grid.token(t);
        counts[r.i * grid.wp + r.j] += 1;
    }
    let mut m = vec![T::zero(); cells * tokens.len()];
    for (c, &t) in tokens.iter().enumerate() {
        let r = grid.token(t);
        let cell = r.i * grid.wp + r.j;
        m[cell * tokens.len() + c] = T::of(1.0 / counts[cell] as f64);
    }
    m
}

fn label_targets(label: &Label) -> Vec<usize> {
    match label {
        Label::Class(c) => vec![*c],
        Label::Segmentation(v) => v.clone(),
    }
}

/// Accuracy (or mIOU for PatchSeg) of `task` on the listed items.
pub fn evaluate_task(task: &TaskModel, grid: &TokenGrid, patches: &[PatchArray], labels: &[Label], idx: &[usize], classes: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let b = task.model.store.bind(&mut tape, false)?;
    let (mut truth, mut pred) = (Vec::new(), Vec::new());
    for &i in idx {
        let logits = task.logits(&mut tape, &b, grid, &patches[i])?;
        let v = tape.value(logits);
        for row in v.chunks(classes) {
            pred.push(row.iter().enumerate().fold(0, |best, (c, x)| if *x > row[best] { c } else { best }));
        }
        truth.extend(label_targets(&labels[i]));
    }
    Ok(match task.kind {
        TaskKind::PatchSeg => miou(&truth, &pred, classes),
        _ => truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / truth.len().max(1) as f64,
    })
}

/// Supervised finetuning of the encoder plus a linear head under `recipe`.
/// The dataset is split 60/20/20; the reported test metric is the one at
/// the best validation epoch.
pub fn finetune(model: &Model<f32>, dataset: &LabeledDataset, recipe: Recipe, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    let classes = dataset.num_classes;
    let mut task = TaskModel::new(model.clone(), dataset.kind, classes, cfg.seed);
    let grid = task.model.grid(dataset.dims)?;
    let patches: Vec<PatchArray> = dataset.items.iter().map(|(s, _)| patchify_on(s, &task.model.registry, &grid)).collect::<Result<_>>()?;
    let labels: Vec<Label> = dataset.items.iter().map(|(_, l)| l.clone()).collect();
    let (train, val, test) = split_indices(dataset.len(), cfg.seed);
    let plan = build_finetune_groups(&task.model, recipe, cfg.base_lr, cfg.epochs);
    let mut opt = AdamW::new(OptimizerConfig::default(), task.model.store.len());
    let metric = if dataset.kind == TaskKind::PatchSeg { "mIOU" } else { "accuracy" };
    let initial_val = evaluate_task(&task, &grid, &patches, &labels, &val, classes)?;
    let initial_test = evaluate_task(&task, &grid, &patches, &labels, &test, classes)?;
    let mut epochs = Vec::new();
    let (mut best_epoch, mut best_val, mut test_at_best) = (None, initial_val, initial_test);
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let mut order = train.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seed::rng(cfg.seed, &[0xE90C, epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(bs) {
            let mut tape = Tape::new();
            let b = task.model.store.bind(&mut tape, true)?;
            let mut terms = Vec::new();
            for &i in chunk {
                let logits = task.logits(&mut tape, &b, &grid, &patches[i])?;
                let l = tape.masked_cross_entropy(logits, &label_targets(&labels[i]), None)?;
                terms.push((l, 1.0 / chunk.len() as f32));
            }
            let loss = tape.weighted_sum(&terms)?;
            tape.backward(loss)?;
            let l = tape.scalar(loss) as f64;
            if !l.is_finite() {
                return Err(Error::NonFinite { what: "finetuning loss", step: epoch });
            }
            loss_sum += l * chunk.len() as f64;
            let grads = collect_grads(&tape, &b);
            opt.step(&mut task.model.store, &grads, |id| plan.lr(id, epoch));
        }
        let v = evaluate_task(&task, &grid, &patches, &labels, &val, classes)?;
        let t = evaluate_task(&task, &grid, &patches, &labels, &test, classes)?;
        if best_epoch.is_none() || v > best_val {
            best_epoch = Some(epoch);
            best_val = v;
            test_at_best = t;
        }
        epochs.push(EpochMetrics { epoch, train_loss: loss_sum / train.len().max(1) as f64, val: v, test: t });
    }
    Ok(FinetuneReport { task: dataset.kind, metric, recipe, initial_val, initial_test, epochs, best_epoch, best_val, test_at_best })
}

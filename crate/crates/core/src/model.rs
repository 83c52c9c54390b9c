//! Encoder–decoder transformer over tokens, the frozen target projector, and
//! the two-view forward pass.

use serde::{Deserialize, Serialize};

use crate::datagen::{BandsetScheme, Dims, ModalityRegistry, Role};
use crate::error::{Error, Result};
use crate::maskplan::{MaskPlan, MaskingConfig};
use crate::numerics::{multi_head_attention, Scalar, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::seed;
use crate::tokenize::{apply_band_mask, project, sample_band_mask, BandDropoutConfig, PatchArray, Projection, ProjectionMode, ProjectionSet, TokenGrid};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    Nano,
    Tiny,
    Base,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nano" => Ok(Preset::Nano),
            "tiny" => Ok(Preset::Tiny),
            "base" => Ok(Preset::Base),
            _ => Err(Error::Config(format!("unknown preset `{s}` (expected Nano, Tiny or Base)"))),
        }
    }
}

/// What the frozen target path projects with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetProjection {
    /// Snapshot of the online projection at initialization (nonlinear if the online one is).
    FrozenCopy,
    /// Separately initialized, strictly linear frozen projection.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub decoder_width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub projection: ProjectionMode,
    pub hidden: usize,
    pub scheme: BandsetScheme,
    pub target_projection: TargetProjection,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (width, encoder_depth, decoder_depth, heads, hidden) = match p {
            Preset::Nano => (64, 4, 2, 4, 12),
            Preset::Tiny => (96, 4, 2, 4, 64),
            Preset::Base => (128, 6, 2, 8, 64),
        };
        Self {
            width,
            encoder_depth,
            decoder_depth,
            decoder_width: width,
            heads,
            mlp_ratio: 4,
            patch_size: 4,
            projection: ProjectionMode::Nonlinear,
            hidden,
            scheme: BandsetScheme::SingleBandset,
            target_projection: TargetProjection::FrozenCopy,
        }
    }

    pub fn mlp_width(&self) -> usize {
        self.width * self.mlp_ratio
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.heads == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return bad("model.width, heads, patch_size and mlp_ratio must be positive".into());
        }
        if !self.width.is_multiple_of(self.heads) || !self.decoder_width.is_multiple_of(self.heads) {
            return bad(format!("model widths {} / {} must be divisible by {} heads", self.width, self.decoder_width, self.heads));
        }
        if !self.width.is_multiple_of(4) || !self.decoder_width.is_multiple_of(4) {
            return bad("model widths must be multiples of 4 for the sinusoidal embeddings".into());
        }
        if self.decoder_width == 0 || self.decoder_width > self.width {
            return bad(format!("model.decoder_width must lie in 1..={}", self.width));
        }
        if self.projection == ProjectionMode::Nonlinear && self.hidden == 0 {
            return bad("model.hidden must be positive for the nonlinear projection".into());
        }
        Ok(())
    }
}

/// `[sin(p·f_0), cos(p·f_0), sin(p·f_1), …]` with `f_k = 10000^(−2k/width)`.
fn sinusoid(pos: f64, width: usize, out: &mut [f64]) {
    for k in 0..width / 2 {
        let f = 10000f64.powf(-((2 * k) as f64) / width as f64);
        out[2 * k] = (pos * f).sin();
        out[2 * k + 1] = (pos * f).cos();
    }
}

/// Fixed positional embedding `[n, width]`: 2D sinusoid over the patch row and
/// column (half the width each) plus a full-width sinusoid over the timestep.
pub fn positional_embedding<T: Scalar>(grid: &TokenGrid, tokens: &[usize], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(tokens.len() * width);
    let mut spatial = vec![0.0; width];
    let mut temporal = vec![0.0; width];
    for &i in tokens {
        let rec = grid.token(i);
        sinusoid(rec.i as f64, width / 2, &mut spatial[..width / 2]);
        sinusoid(rec.j as f64, width / 2, &mut spatial[width / 2..]);
        sinusoid(rec.t as f64, width, &mut temporal);
        out.extend(spatial.iter().zip(&temporal).map(|(a, b)| T::of(a + b)));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: (ParamId, ParamId),
    pub qkv: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

impl Block {
    fn init<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, dm: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut lin = |store: &mut ParamStore<T>, name: &str, i: usize, o: usize| {
            (store.xavier(format!("{prefix}.{name}.w"), i, o, rng), store.zeros(format!("{prefix}.{name}.b"), &[o], false))
        };
        let ln =
            |store: &mut ParamStore<T>, name: &str| (store.ones(format!("{prefix}.{name}.g"), &[d]), store.zeros(format!("{prefix}.{name}.b"), &[d], false));
        let ln1 = ln(store, "ln1");
        let qkv = lin(store, "qkv", d, 3 * d);
        let out = lin(store, "out", d, d);
        let ln2 = ln(store, "ln2");
        let fc1 = lin(store, "fc1", d, dm);
        let fc2 = lin(store, "fc2", dm, d);
        Self { ln1, qkv, out, ln2, fc1, fc2 }
    }

    /// Pre-norm transformer block.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, b: &Bound, x: Var, heads: usize) -> Result<Var> {
        let d = tape.shape(x)[1];
        let h = tape.layer_norm(x, b[self.ln1.0], b[self.ln1.1], T::of(LN_EPS))?;
        let qkv = tape.affine(h, b[self.qkv.0], Some(b[self.qkv.1]))?;
        let q = tape.slice_cols(qkv, 0, d)?;
        let k = tape.slice_cols(qkv, d, d)?;
        let v = tape.slice_cols(qkv, 2 * d, d)?;
        let a = multi_head_attention(tape, q, k, v, heads, None)?;
        let a = tape.affine(a, b[self.out.0], Some(b[self.out.1]))?;
        let x = tape.add(x, a)?;
        let h = tape.layer_norm(x, b[self.ln2.0], b[self.ln2.1], T::of(LN_EPS))?;
        let h = tape.affine(h, b[self.fc1.0], Some(b[self.fc1.1]))?;
        let h = tape.gelu(h);
        let h = tape.affine(h, b[self.fc2.0], Some(b[self.fc2.1]))?;
        Ok(tape.add(x, h)?)
    }
}

/// Frozen projections for every (modality, bandset), maps included.
/// Never bound with gradients; parameters stay as snapshotted.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTargetProjector<T> {
    pub store: ParamStore<T>,
    pub projections: ProjectionSet,
}

impl<T: Scalar> FrozenTargetProjector<T> {
    /// Projects the raw (full-band) patches of `tokens` to `[n, D]` values.
    pub fn targets(&self, grid: &TokenGrid, patches: &PatchArray, tokens: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false)?;
        let y = project(&mut tape, &bound, patches, grid, &self.projections, tokens)?;
        Ok(tape.array(y).clone().into_data())
    }

    pub fn cast<U: Scalar>(&self) -> FrozenTargetProjector<U> {
        FrozenTargetProjector { store: self.store.cast(), projections: self.projections.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub registry: ModalityRegistry,
    pub store: ParamStore<T>,
    pub projections: ProjectionSet,
    pub group_embed: ParamId,
    pub encoder: Vec<Block>,
    pub encoder_norm: Option<(ParamId, ParamId)>,
    pub decoder_in: (ParamId, ParamId),
    pub mask_token: ParamId,
    pub decoder_group_embed: ParamId,
    pub decoder: Vec<Block>,
    pub decoder_norm: Option<(ParamId, ParamId)>,
    pub head: (ParamId, ParamId),
    pub frozen: FrozenTargetProjector<T>,
}

/// Groups of the registry under `scheme`, in token-grid order.
fn reference_grid(registry: &ModalityRegistry, cfg: &ModelConfig) -> Result<TokenGrid> {
    TokenGrid::new(registry, Dims::new(1, cfg.patch_size, cfg.patch_size), cfg.patch_size, cfg.scheme)
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, registry: ModalityRegistry, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed, &[0x1417]);
        let (d, dd) = (cfg.width, cfg.decoder_width);
        let grid = reference_grid(&registry, &cfg)?;
        let mut store = ParamStore::new();
        let mut projections = ProjectionSet::default();
        for g in grid.groups().iter().filter(|g| g.role == Role::EncodeDecode) {
            projections.items.push(Projection::init(
                &mut store,
                &format!("proj.{}.{}", registry.specs()[g.modality].name, g.bandset),
                cfg.projection,
                (g.modality, g.bandset),
                g.channels.len(),
                cfg.patch_size,
                cfg.hidden,
                d,
                &mut rng,
            )?);
        }
        let n_groups = grid.groups().len();
        let group_embed = store.normal("embed.group", &[n_groups, d], 0.02, false, &mut rng);
        let encoder = (0..cfg.encoder_depth).map(|k| Block::init(&mut store, &format!("enc.{k}"), d, cfg.mlp_width(), &mut rng)).collect();
        let encoder_norm = (cfg.encoder_depth > 0).then(|| (store.ones("enc.norm.g", &[d]), store.zeros("enc.norm.b", &[d], false)));
        let decoder_in = (store.xavier("dec.in.w", d, dd, &mut rng), store.zeros("dec.in.b", &[dd], false));
        let mask_token = store.normal("dec.mask_token", &[1, dd], 0.02, false, &mut rng);
        let decoder_group_embed = store.normal("dec.embed.group", &[n_groups, dd], 0.02, false, &mut rng);
        let decoder = (0..cfg.decoder_depth).map(|k| Block::init(&mut store, &format!("dec.{k}"), dd, dd * cfg.mlp_ratio, &mut rng)).collect();
        let decoder_norm = (cfg.decoder_depth > 0).then(|| (store.ones("dec.norm.g", &[dd]), store.zeros("dec.norm.b", &[dd], false)));
        let head = (store.xavier("dec.head.w", dd, d, &mut rng), store.zeros("dec.head.b", &[d], false));

        let mut frozen_store = ParamStore::new();
        let mut frozen_set = ProjectionSet::default();
        for g in grid.groups() {
            let name = format!("frozen.{}.{}", registry.specs()[g.modality].name, g.bandset);
            let copy = (cfg.target_projection == TargetProjection::FrozenCopy).then(|| projections.get(g.modality, g.bandset)).flatten();
            let proj = match copy {
                Some(online) => {
                    let mut ids = Vec::new();
                    for id in online.param_ids() {
                        let p = store.get(id);
                        let suffix = p.name.rsplit('.').next().unwrap_or_default();
                        ids.push(frozen_store.add(format!("{name}.{suffix}"), &p.shape, p.data.clone(), false));
                    }
                    let mut p = online.clone();
                    p.params = match p.params {
                        crate::tokenize::ProjectionParams::Linear { .. } => crate::tokenize::ProjectionParams::Linear { w: ids[0], b: ids[1] },
                        crate::tokenize::ProjectionParams::Nonlinear { .. } => {
                            crate::tokenize::ProjectionParams::Nonlinear { pixel_w: ids[0], pixel_b: ids[1], token_w: ids[2], token_b: ids[3] }
                        }
                    };
                    p
                }
                None => {
                    let mode = match cfg.target_projection {
                        TargetProjection::FrozenCopy => cfg.projection,
                        TargetProjection::Linear => ProjectionMode::Linear,
                    };
                    Projection::init(&mut frozen_store, &name, mode, (g.modality, g.bandset), g.channels.len(), cfg.patch_size, cfg.hidden, d, &mut rng)?
                }
            };
            frozen_set.items.push(proj);
        }
        Ok(Self {
            cfg,
            registry,
            store,
            projections,
            group_embed,
            encoder,
            encoder_norm,
            decoder_in,
            mask_token,
            decoder_group_embed,
            decoder,
            decoder_norm,
            head,
            frozen: FrozenTargetProjector { store: frozen_store, projections: frozen_set },
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            registry: self.registry.clone(),
            store: self.store.cast(),
            projections: self.projections.clone(),
            group_embed: self.group_embed,
            encoder: self.encoder.clone(),
            encoder_norm: self.encoder_norm,
            decoder_in: self.decoder_in,
            mask_token: self.mask_token,
            decoder_group_embed: self.decoder_group_embed,
            decoder: self.decoder.clone(),
            decoder_norm: self.decoder_norm,
            head: self.head,
            frozen: self.frozen.cast(),
        }
    }

    /// Whether a parameter belongs to the encoder side (projection, token
    /// embeddings, encoder blocks and final norm).
    pub fn is_encoder_param(&self, id: ParamId) -> bool {
        let name = &self.store.get(id).name;
        name.starts_with("proj.") || name.starts_with("embed.") || name.starts_with("enc.")
    }

    /// Encoder block index (0-based) a parameter belongs to, if any.
    pub fn encoder_block_of(&self, id: ParamId) -> Option<usize> {
        let rest = self.store.get(id).name.strip_prefix("enc.")?;
        rest.split('.').next()?.parse().ok()
    }

    pub fn grid(&self, dims: Dims) -> Result<TokenGrid> {
        TokenGrid::new(&self.registry, dims, self.cfg.patch_size, self.cfg.scheme)
    }

    /// Projection plus positional and (modality, bandset) embeddings.
    pub fn embed_tokens(&self, tape: &mut Tape<T>, b: &Bound, grid: &TokenGrid, patches: &PatchArray, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Mask("encoder received zero visible tokens".into()));
        }
        if let Some(&i) = tokens.iter().find(|&&i| grid.role_of(i) != Role::EncodeDecode) {
            return Err(Error::Mask(format!("token {i} is target-only and cannot be encoded")));
        }
        let x = project(tape, b, patches, grid, &self.projections, tokens)?;
        self.add_metadata(tape, grid, tokens, x, b[self.group_embed], self.cfg.width)
    }

    fn add_metadata(&self, tape: &mut Tape<T>, grid: &TokenGrid, tokens: &[usize], x: Var, table: Var, width: usize) -> Result<Var> {
        let pos = tape.constant(positional_embedding(grid, tokens, width), &[tokens.len(), width])?;
        let groups: Vec<usize> = tokens.iter().map(|&i| grid.token(i).group).collect();
        let meta = tape.gather_rows(table, &groups)?;
        let x = tape.add(x, pos)?;
        Ok(tape.add(x, meta)?)
    }

    /// Encoder blocks and final norm over already-embedded tokens.
    pub fn encode_embedded(&self, tape: &mut Tape<T>, b: &Bound, mut x: Var) -> Result<Var> {
        for blk in &self.encoder {
            x = blk.forward(tape, b, x, self.cfg.heads)?;
        }
        if let Some((g, be)) = self.encoder_norm {
            x = tape.layer_norm(x, b[g], b[be], T::of(LN_EPS))?;
        }
        Ok(x)
    }

    /// Latents `[n, D]` for `tokens` (ascending global indices).
    pub fn encode(&self, tape: &mut Tape<T>, b: &Bound, grid: &TokenGrid, patches: &PatchArray, tokens: &[usize]) -> Result<Var> {
        let x = self.embed_tokens(tape, b, grid, patches, tokens)?;
        self.encode_embedded(tape, b, x)
    }

    /// Latents for every encode-decode token, as used by probes and finetuning.
    pub fn encode_all(&self, tape: &mut Tape<T>, b: &Bound, grid: &TokenGrid, patches: &PatchArray) -> Result<(Var, Vec<usize>)> {
        let tokens: Vec<usize> = (0..grid.len()).filter(|&i| grid.role_of(i) == Role::EncodeDecode).collect();
        let z = self.encode(tape, b, grid, patches, &tokens)?;
        Ok((z, tokens))
    }

    /// Predictions `[n_t, D]` at the plan's Target tokens, ascending. `latents`
    /// must be the encoder output for `plan.visible()`; Ignore tokens never
    /// enter the decoder.
    pub fn decode(&self, tape: &mut Tape<T>, b: &Bound, grid: &TokenGrid, latents: Var, plan: &MaskPlan) -> Result<Var> {
        let visible = plan.visible();
        let targets = plan.targets();
        if targets.is_empty() {
            return Err(Error::Mask("decoder needs at least one target token".into()));
        }
        if tape.shape(latents)[0] != visible.len() {
            return Err(Error::Mask(format!("{} latents for {} visible tokens", tape.shape(latents)[0], visible.len())));
        }
        let dd = self.cfg.decoder_width;
        let h = tape.affine(latents, b[self.decoder_in.0], Some(b[self.decoder_in.1]))?;
        let masks = tape.gather_rows(b[self.mask_token], &vec![0; targets.len()])?;
        let seq = tape.concat_rows(&[h, masks])?;
        let order: Vec<usize> = visible.iter().chain(&targets).copied().collect();
        let mut x = self.add_metadata(tape, grid, &order, seq, b[self.decoder_group_embed], dd)?;
        for blk in &self.decoder {
            x = blk.forward(tape, b, x, self.cfg.heads)?;
        }
        if let Some((g, be)) = self.decoder_norm {
            x = tape.layer_norm(x, b[g], b[be], T::of(LN_EPS))?;
        }
        let rows: Vec<usize> = (visible.len()..order.len()).collect();
        let out = tape.gather_rows(x, &rows)?;
        Ok(tape.affine(out, b[self.head.0], Some(b[self.head.1]))?)
    }

    /// Frozen projections of the raw patches at `tokens`, as a constant `[n, D]`.
    pub fn target_tokens(&self, tape: &mut Tape<T>, grid: &TokenGrid, raw: &PatchArray, tokens: &[usize]) -> Result<Var> {
        let data = self.frozen.targets(grid, raw, tokens)?;
        Ok(tape.constant(data, &[tokens.len(), self.cfg.width])?)
    }

    /// Two independently masked (and band-dropped) views of every sample.
    pub fn forward_two_views(
        &self,
        tape: &mut Tape<T>,
        b: &Bound,
        grid: &TokenGrid,
        batch: &[PatchArray],
        views: &ViewSettings,
        step_seed: u64,
    ) -> Result<TwoViewBatch<T>> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let decode_only: Vec<bool> = self.registry.specs().iter().map(|s| s.role == Role::TargetOnly).collect();
        let mut out: [Vec<ViewSample<T>>; 2] = [Vec::new(), Vec::new()];
        let mut pooled = Vec::with_capacity(2);
        for (v, samples) in out.iter_mut().enumerate() {
            let view_seed = if views.same_seed_for_both_views { seed::derive(step_seed, &[0]) } else { seed::derive(step_seed, &[v as u64]) };
            let rate = views.dropout.sample_rate(&mut seed::rng(view_seed, &[0xD0]));
            let mut pools = Vec::with_capacity(batch.len());
            for (s, raw) in batch.iter().enumerate() {
                let plan = views.masking.plan(grid, seed::derive(view_seed, &[s as u64, 1]))?;
                let band_mask = sample_band_mask(&self.registry, &views.dropout, rate, &mut seed::rng(view_seed, &[s as u64, 2]));
                let online = if band_mask.is_noop() { raw.clone() } else { apply_band_mask(raw, grid, &band_mask) };
                let visible = plan.visible();
                let latents = self.encode(tape, b, grid, &online, &visible)?;
                let pool = tape.mean_rows(latents)?;
                let preds = self.decode(tape, b, grid, latents, &plan)?;
                let target_idx = plan.targets();
                let targets = self.frozen.targets(grid, raw, &target_idx)?;
                let target_modality = target_idx.iter().map(|&i| grid.token(i).modality).collect();
                pools.push(pool);
                samples.push(ViewSample { plan, preds, targets, target_modality, pooled: pool, drop_rate: rate });
            }
            pooled.push(tape.concat_rows(&pools)?);
        }
        Ok(TwoViewBatch { views: out, pooled: [pooled[0], pooled[1]], decode_only, width: self.cfg.width })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ViewSettings {
    pub masking: MaskingConfig,
    pub dropout: BandDropoutConfig,
    /// Test hook: both views share one seed, hence identical plans and dropout.
    pub same_seed_for_both_views: bool,
}

#[derive(Debug, Clone)]
pub struct ViewSample<T> {
    pub plan: MaskPlan,
    /// `[n_t, D]` predictions, aligned row-by-row with `targets`.
    pub preds: Var,
    /// Row-major `[n_t, D]` frozen targets.
    pub targets: Vec<T>,
    pub target_modality: Vec<usize>,
    /// `[1, D]` mean of the view's encoder outputs.
    pub pooled: Var,
    pub drop_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TwoViewBatch<T> {
    pub views: [Vec<ViewSample<T>>; 2],
    /// `[B, D]` pooled vectors per view.
    pub pooled: [Var; 2],
    /// Per modality: used only as a target.
    pub decode_only: Vec<bool>,
    pub width: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{default_registry, SceneGenerator};
    use crate::maskplan::{plan_v11, TokenState};
    use crate::numerics::{finite_difference_check, CoordSelection, DiffArray, ShapeError};
    use crate::tokenize::patchify_on;

    fn toy_cfg() -> ModelConfig {
        ModelConfig {
            width: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            decoder_width: 8,
            heads: 2,
            mlp_ratio: 2,
            patch_size: 4,
            projection: ProjectionMode::Nonlinear,
            hidden: 3,
            scheme: BandsetScheme::SingleBandset,
            target_projection: TargetProjection::FrozenCopy,
        }
    }

    fn setup(cfg: ModelConfig, dims: Dims) -> (Model<f64>, TokenGrid, Vec<PatchArray>) {
        let reg = default_registry().subset(&["S1", "S2", "WorldCover"]).unwrap();
        let model = Model::<f64>::new(cfg, reg.clone(), 7).unwrap();
        let gen = SceneGenerator::with_defaults(reg.clone());
        let grid = model.grid(dims).unwrap();
        let patches = (0..3).map(|s| patchify_on(&gen.generate_scene(dims, s).unwrap(), &reg, &grid).unwrap()).collect();
        (model, grid, patches)
    }

    fn shape_err(e: Error) -> ShapeError {
        match e {
            Error::Shape(s) => s,
            other => ShapeError::Mismatch { op: "model", detail: other.to_string() },
        }
    }

    #[test]
    fn presets_validate() {
        for p in [Preset::Nano, Preset::Tiny, Preset::Base] {
            ModelConfig::preset(p).validate().unwrap();
        }
        let mut bad = toy_cfg();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        bad = toy_cfg();
        bad.decoder_width = 16;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_depth_encoder_is_embedding_only() {
        let cfg = ModelConfig { encoder_depth: 0, ..toy_cfg() };
        let (m, grid, patches) = setup(cfg, Dims::new(2, 8, 8));
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, false).unwrap();
        let toks = [0, 2, 5];
        let e = m.embed_tokens(&mut tape, &b, &grid, &patches[0], &toks).unwrap();
        let z = m.encode(&mut tape, &b, &grid, &patches[0], &toks).unwrap();
        assert_eq!(tape.value(e), tape.value(z));
        assert!(m.encode(&mut tape, &b, &grid, &patches[0], &[]).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (m, grid, patches) = setup(toy_cfg(), Dims::new(2, 8, 8));
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, false).unwrap();
        let toks: Vec<usize> = (0..10).collect();
        let x = m.embed_tokens(&mut tape, &b, &grid, &patches[0], &toks).unwrap();
        let perm = [3, 1, 4, 0, 9, 2, 6, 5, 8, 7];
        let xp = tape.gather_rows(x, &perm).unwrap();
        let z = m.encode_embedded(&mut tape, &b, x).unwrap();
        let zp = m.encode_embedded(&mut tape, &b, xp).unwrap();
        let d = 8;
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..d {
                let (a, bb) = (tape.value(zp)[r * d + c], tape.value(z)[src * d + c]);
                assert!((a - bb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_block_gradient_check() {
        let (m, grid, patches) = setup(toy_cfg(), Dims::new(1, 8, 8));
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, false).unwrap();
        let toks: Vec<usize> = (0..6).collect();
        let x = m.embed_tokens(&mut tape, &b, &grid, &patches[0], &toks).unwrap();
        let x0 = tape.array(x).clone();
        let inputs: Vec<DiffArray<f64>> = std::iter::once(DiffArray::new(x0.data().to_vec(), x0.shape()).unwrap())
            .chain(m.store.iter().map(|(_, p)| DiffArray::new(p.data.clone(), &p.shape).unwrap()))
            .collect();
        let report = finite_difference_check(
            |tape, vars| {
                let bound = Bound::from_vars(vars[1..].to_vec());
                let z = m.encode_embedded(tape, &bound, vars[0]).map_err(shape_err)?;
                let w = tape.constant((0..z_len(tape, z)).map(|i| ((i as f64) * 0.37).sin()).collect(), tape.shape(z).to_vec().as_slice())?;
                let zw = tape.mul(z, w)?;
                Ok(tape.sum(zw))
            },
            &inputs,
            1e-6,
            CoordSelection::Sample { per_input: 4, seed: 1 },
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn z_len(tape: &Tape<f64>, v: Var) -> usize {
        tape.value(v).len()
    }

    #[test]
    fn ignore_tokens_do_not_influence_predictions() {
        let (m, grid, patches) = setup(toy_cfg(), Dims::new(2, 8, 8));
        let mut plan = plan_v11(&grid, 0.0, 0.5, 3).unwrap();
        let visible = plan.visible();
        plan.states[visible[0]] = TokenState::Ignore;
        let ignored = visible[0];
        let run = |p: &PatchArray| {
            let mut tape = Tape::new();
            let b = m.store.bind(&mut tape, false).unwrap();
            let z = m.encode(&mut tape, &b, &grid, p, &plan.visible()).unwrap();
            let y = m.decode(&mut tape, &b, &grid, z, &plan).unwrap();
            tape.value(y).to_vec()
        };
        let mut altered = patches[0].clone();
        let rec = grid.token(ignored);
        let start = grid.groups()[rec.group].start;
        let w = altered.groups[rec.group].width;
        for v in &mut altered.groups[rec.group].data[(ignored - start) * w..(ignored - start + 1) * w] {
            *v += 3.0;
        }
        assert_eq!(run(&patches[0]), run(&altered));
    }

    #[test]
    fn zero_depth_decoder_reads_mask_token_plus_embeddings() {
        let cfg = ModelConfig { decoder_depth: 0, ..toy_cfg() };
        let (m, grid, patches) = setup(cfg, Dims::new(1, 8, 8));
        let plan = plan_v11(&grid, 0.0, 0.5, 1).unwrap();
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, false).unwrap();
        let z = m.encode(&mut tape, &b, &grid, &patches[0], &plan.visible()).unwrap();
        let y = m.decode(&mut tape, &b, &grid, z, &plan).unwrap();
        let targets = plan.targets();
        let pos = positional_embedding::<f64>(&grid, &targets, 8);
        let mask = &m.store.get(m.mask_token).data;
        let emb = &m.store.get(m.decoder_group_embed).data;
        let (hw, hb) = (&m.store.get(m.head.0).data, &m.store.get(m.head.1).data);
        for (r, &t) in targets.iter().enumerate() {
            let g = grid.token(t).group;
            let x: Vec<f64> = (0..8).map(|c| mask[c] + pos[r * 8 + c] + emb[g * 8 + c]).collect();
            for o in 0..8 {
                let want = hb[o] + (0..8).map(|c| x[c] * hw[c * 8 + o]).sum::<f64>();
                assert!((tape.value(y)[r * 8 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_targets_match_straight_line_oracle() {
        let (m, grid, patches) = setup(toy_cfg(), Dims::new(1, 8, 8));
        let toks: Vec<usize> = (0..grid.len()).collect();
        let got = m.frozen.targets(&grid, &patches[0], &toks).unwrap();
        for (r, &t) in toks.iter().enumerate() {
            let rec = grid.token(t);
            let proj = m.frozen.projections.get(rec.modality, rec.bandset).unwrap();
            let crate::tokenize::ProjectionParams::Nonlinear { pixel_w, pixel_b, token_w, token_b } = proj.params else { panic!() };
            let (pw, pb, tw, tb) =
                (&m.frozen.store.get(pixel_w).data, &m.frozen.store.get(pixel_b).data, &m.frozen.store.get(token_w).data, &m.frozen.store.get(token_b).data);
            let x = patches[0].token(&grid, t);
            let c = proj.channels;
            let mut out = tb.clone();
            for px in 0..16 {
                for h in 0..3 {
                    let mut a = pb[h];
                    for ch in 0..c {
                        a += x[px * c + ch] as f64 * pw[ch * 3 + h];
                    }
                    let a = a.max(0.0);
                    for o in 0..8 {
                        out[o] += a * tw[(px * 3 + h) * 8 + o];
                    }
                }
            }
            for o in 0..8 {
                assert!((got[r * 8 + o] - out[o]).abs() < 1e-10);
            }
        }
        // the online projection starts as the frozen one
        let s2 = m.registry.index_of("S2").unwrap();
        let online = m.projections.get(s2, 0).unwrap().param_ids();
        let frozen = m.frozen.projections.get(s2, 0).unwrap().param_ids();
        for (a, b) in online.iter().zip(&frozen) {
            assert_eq!(m.store.get(*a).data, m.frozen.store.get(*b).data);
        }
    }

    #[test]
    fn identical_patches_give_identical_targets() {
        let (m, grid, mut patches) = setup(toy_cfg(), Dims::new(1, 8, 8));
        let w = patches[0].groups[1].width;
        let first = patches[0].groups[1].data[..w].to_vec();
        patches[0].groups[1].data[w..2 * w].copy_from_slice(&first);
        let start = grid.groups()[1].start;
        let t = m.frozen.targets(&grid, &patches[0], &[start, start + 1]).unwrap();
        assert_eq!(t[..8], t[8..]);
    }

    #[test]
    fn linear_target_mode_is_strictly_linear() {
        let cfg = ModelConfig { target_projection: TargetProjection::Linear, ..toy_cfg() };
        let (m, _, _) = setup(cfg, Dims::new(1, 8, 8));
        assert!(m.frozen.projections.items.iter().all(|p| p.mode() == ProjectionMode::Linear));
        assert!(m.projections.items.iter().all(|p| p.mode() == ProjectionMode::Nonlinear));
    }

    #[test]
    fn same_seed_views_coincide_and_pooling_is_mean() {
        let (m, grid, patches) = setup(toy_cfg(), Dims::new(2, 8, 8));
        let views = ViewSettings { same_seed_for_both_views: true, ..Default::default() };
        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, false).unwrap();
        let out = m.forward_two_views(&mut tape, &b, &grid, &patches, &views, 11).unwrap();
        for (a, c) in out.views[0].iter().zip(&out.views[1]) {
            assert_eq!(tape.value(a.preds), tape.value(c.preds));
            assert_eq!(a.plan, c.plan);
        }
        assert_eq!(tape.value(out.pooled[0]), tape.value(out.pooled[1]));

        let mut tape = Tape::new();
        let b = m.store.bind(&mut tape, false).unwrap();
        let z = m.encode(&mut tape, &b, &grid, &patches[0], &[4]).unwrap();
        let p = tape.mean_rows(z).unwrap();
        assert_eq!(tape.value(z), tape.value(p));
        let z = m.encode(&mut tape, &b, &grid, &patches[0], &[1, 4, 9]).unwrap();
        let p = tape.mean_rows(z).unwrap();
        for c in 0..8 {
            let mean = (0..3).map(|r| tape.value(z)[r * 8 + c]).sum::<f64>() / 3.0;
            assert!((tape.value(p)[c] - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn two_view_loss_gradient_check() {
        for mode in [ProjectionMode::Linear, ProjectionMode::Nonlinear] {
            let r = crate::checks::two_view_loss_check(mode, 3).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}

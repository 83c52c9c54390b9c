//! Scene → token conversion: patchification under either bandset scheme,
//! random band dropout, linear / nonlinear patch projections, and the
//! strided-convolution ↔ reshape-plus-affine patch embedding equivalence.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{BandsetScheme, Dims, ModalityArray, ModalityRegistry, Role, Scene};
use crate::error::{Error, Result};
use crate::numerics::{kernels, Scalar, Tape, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TokenRecord {
    pub modality: usize,
    pub bandset: usize,
    /// Index of the (modality, bandset) group in [`TokenGrid::groups`].
    pub group: usize,
    pub t: usize,
    pub i: usize,
    pub j: usize,
}

/// A contiguous run of tokens sharing a (modality, bandset).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGroup {
    pub modality: usize,
    pub bandset: usize,
    /// Channel indices in the modality's per-pixel vector (one-hot slots for maps).
    pub channels: Vec<usize>,
    pub role: Role,
    pub is_map: bool,
    pub timesteps: usize,
    pub start: usize,
    pub len: usize,
}

/// Token lattice of one scene geometry. Tokens are ordered by group, then
/// `t`, then spatial row `i`, then column `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub patch_size: usize,
    pub scheme: BandsetScheme,
    pub dims: Dims,
    pub hp: usize,
    pub wp: usize,
    groups: Vec<TokenGroup>,
    tokens: Vec<TokenRecord>,
    modality_counts: Vec<usize>,
}

impl TokenGrid {
    pub fn new(registry: &ModalityRegistry, dims: Dims, patch: usize, scheme: BandsetScheme) -> Result<Self> {
        dims.check_patch(patch)?;
        let (hp, wp) = (dims.h / patch, dims.w / patch);
        let mut groups = Vec::new();
        let mut tokens = Vec::new();
        let mut modality_counts = vec![0; registry.len()];
        for (m, spec) in registry.specs().iter().enumerate() {
            let timesteps = if spec.is_map() { 1 } else { dims.t };
            for (b, channels) in spec.partition(scheme).into_iter().enumerate() {
                let g = groups.len();
                let start = tokens.len();
                for t in 0..timesteps {
                    for i in 0..hp {
                        for j in 0..wp {
                            tokens.push(TokenRecord { modality: m, bandset: b, group: g, t, i, j });
                        }
                    }
                }
                let len = tokens.len() - start;
                modality_counts[m] += len;
                groups.push(TokenGroup { modality: m, bandset: b, channels, role: spec.role, is_map: spec.is_map(), timesteps, start, len });
            }
        }
        Ok(Self { patch_size: patch, scheme, dims, hp, wp, groups, tokens, modality_counts })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn token(&self, idx: usize) -> &TokenRecord {
        &self.tokens[idx]
    }

    pub fn groups(&self) -> &[TokenGroup] {
        &self.groups
    }

    pub fn group_index(&self, modality: usize, bandset: usize) -> Option<usize> {
        self.groups.iter().position(|g| g.modality == modality && g.bandset == bandset)
    }

    pub fn modality_counts(&self) -> &[usize] {
        &self.modality_counts
    }

    pub fn role_of(&self, idx: usize) -> Role {
        self.groups[self.tokens[idx].group].role
    }

    /// Raw patch vector length of a group's tokens.
    pub fn group_width(&self, group: usize) -> usize {
        self.patch_size * self.patch_size * self.groups[group].channels.len()
    }
}

/// Raw patch vectors per group, each row laid out `[py, px, channel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchArray {
    pub groups: Vec<GroupPatches>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPatches {
    pub width: usize,
    pub data: Vec<f32>,
}

impl GroupPatches {
    pub fn rows(&self) -> usize {
        self.data.len() / self.width.max(1)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.width..(r + 1) * self.width]
    }
}

impl PatchArray {
    /// Patch vector of global token `idx`.
    pub fn token<'a>(&'a self, grid: &TokenGrid, idx: usize) -> &'a [f32] {
        let rec = grid.token(idx);
        self.groups[rec.group].row(idx - grid.groups()[rec.group].start)
    }
}

pub fn patchify(scene: &Scene, registry: &ModalityRegistry, patch: usize, scheme: BandsetScheme) -> Result<(TokenGrid, PatchArray)> {
    let grid = TokenGrid::new(registry, scene.dims, patch, scheme)?;
    let patches = patchify_on(scene, registry, &grid)?;
    Ok((grid, patches))
}

/// Patchifies `scene` onto an existing grid of matching geometry.
pub fn patchify_on(scene: &Scene, registry: &ModalityRegistry, grid: &TokenGrid) -> Result<PatchArray> {
    if scene.dims != grid.dims || scene.arrays.len() != registry.len() {
        return Err(Error::InvalidDims(format!("scene {:?} does not match grid {:?}", scene.dims, grid.dims)));
    }
    let p = grid.patch_size;
    let groups = grid
        .groups()
        .iter()
        .enumerate()
        .map(|(g, group)| {
            let arr = &scene.arrays[group.modality];
            let width = grid.group_width(g);
            let nc = group.channels.len();
            let mut data = vec![0f32; group.len * width];
            for t in 0..group.timesteps {
                for i in 0..grid.hp {
                    for j in 0..grid.wp {
                        let row = (t * grid.hp + i) * grid.wp + j;
                        let out = &mut data[row * width..(row + 1) * width];
                        for py in 0..p {
                            for px in 0..p {
                                let (y, x) = (i * p + py, j * p + px);
                                let cell = &mut out[(py * p + px) * nc..(py * p + px + 1) * nc];
                                if group.is_map {
                                    let class = arr.at(0, y, x, 0) as usize;
                                    cell[class] = 1.0;
                                } else {
                                    for (slot, &band) in group.channels.iter().enumerate() {
                                        cell[slot] = arr.at(t, y, x, band);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            GroupPatches { width, data }
        })
        .collect();
    Ok(PatchArray { groups })
}

/// Reassembles one modality's `[T, H, W, C]` array from its patch vectors.
/// Map modalities come back as class ids (argmax of the one-hot).
pub fn unpatchify(grid: &TokenGrid, patches: &PatchArray, registry: &ModalityRegistry, modality: usize) -> ModalityArray {
    let spec = &registry.specs()[modality];
    let p = grid.patch_size;
    let t_len = if spec.is_map() { 1 } else { grid.dims.t };
    let c_len = if spec.is_map() { 1 } else { spec.bands };
    let mut arr = ModalityArray::zeros(t_len, grid.dims.h, grid.dims.w, c_len);
    for (g, group) in grid.groups().iter().enumerate().filter(|(_, g)| g.modality == modality) {
        let nc = group.channels.len();
        for t in 0..group.timesteps {
            for i in 0..grid.hp {
                for j in 0..grid.wp {
                    let row = patches.groups[g].row((t * grid.hp + i) * grid.wp + j);
                    for py in 0..p {
                        for px in 0..p {
                            let cell = &row[(py * p + px) * nc..(py * p + px + 1) * nc];
                            let (y, x) = (i * p + py, j * p + px);
                            if group.is_map {
                                let class = cell.iter().position(|&v| v == 1.0).unwrap_or(0);
                                arr.set(0, y, x, 0, class as f32);
                            } else {
                                for (slot, &band) in group.channels.iter().enumerate() {
                                    arr.set(t, y, x, band, cell[slot]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    arr
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandDropoutConfig {
    /// Upper end of the uniform law the per-pass drop rate is drawn from.
    pub r_max: f64,
    /// Modalities whose bands may be dropped.
    pub modalities: Vec<String>,
    /// Test hook: use this rate instead of drawing one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_rate: Option<f64>,
}

impl Default for BandDropoutConfig {
    fn default() -> Self {
        Self { r_max: 0.2, modalities: vec!["S2".into(), "Landsat".into()], force_rate: None }
    }
}

impl BandDropoutConfig {
    pub fn with_r_max(r_max: f64) -> Self {
        Self { r_max, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.r_max) || !self.force_rate.is_none_or(ok) {
            return Err(Error::Config(format!("band dropout rate must lie in [0, 1], got r_max={}", self.r_max)));
        }
        Ok(())
    }

    /// Drop probability for one forward pass, `r ~ U[0, r_max]`.
    pub fn sample_rate(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self.force_rate {
            Some(r) => r,
            None if self.r_max > 0.0 => rng.random_range(0.0..self.r_max),
            None => 0.0,
        }
    }
}

/// Which bands one sample loses; `dropped[m][band]`, empty for exempt modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMask {
    pub rate: f64,
    pub dropped: Vec<Vec<bool>>,
}

impl BandMask {
    pub fn none(registry: &ModalityRegistry) -> Self {
        Self { rate: 0.0, dropped: vec![Vec::new(); registry.len()] }
    }

    pub fn is_noop(&self) -> bool {
        self.dropped.iter().flatten().all(|d| !d)
    }
}

/// Draws an independent keep/drop decision per applicable band at `rate`.
pub fn sample_band_mask(registry: &ModalityRegistry, cfg: &BandDropoutConfig, rate: f64, rng: &mut ChaCha8Rng) -> BandMask {
    let dropped = registry
        .specs()
        .iter()
        .map(|s| {
            if s.role == Role::EncodeDecode && cfg.modalities.contains(&s.name) {
                (0..s.bands).map(|_| rate > 0.0 && rng.random::<f64>() < rate).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    BandMask { rate, dropped }
}

/// Zeroes dropped bands across every pixel and timestep of the sample.
pub fn apply_band_mask(patches: &PatchArray, grid: &TokenGrid, mask: &BandMask) -> PatchArray {
    let mut out = patches.clone();
    for (g, group) in grid.groups().iter().enumerate() {
        let Some(dropped) = mask.dropped.get(group.modality).filter(|d| !d.is_empty()) else { continue };
        let slots: Vec<usize> = group.channels.iter().enumerate().filter(|(_, &b)| dropped[b]).map(|(s, _)| s).collect();
        if slots.is_empty() {
            continue;
        }
        let nc = group.channels.len();
        for cell in out.groups[g].data.chunks_mut(nc) {
            for &s in &slots {
                cell[s] = 0.0;
            }
        }
    }
    out
}

/// One-sample band dropout: draws a rate and a band mask from `seed`.
pub fn band_dropout(patches: &PatchArray, grid: &TokenGrid, registry: &ModalityRegistry, cfg: &BandDropoutConfig, seed: u64) -> (PatchArray, BandMask) {
    let mut rng = crate::seed::rng(seed, &[0xD80]);
    let rate = cfg.sample_rate(&mut rng);
    let mask = sample_band_mask(registry, cfg, rate, &mut rng);
    (apply_band_mask(patches, grid, &mask), mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProjectionMode {
    /// `R^{P·P·C} → R^D`, one affine map.
    Linear,
    /// Per-pixel `R^C → R^H` with ReLU, then `R^{P·P·H} → R^D`.
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProjectionParams {
    Linear { w: ParamId, b: ParamId },
    Nonlinear { pixel_w: ParamId, pixel_b: ParamId, token_w: ParamId, token_b: ParamId },
}

/// Patch projection for one (modality, bandset) at one patch size.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub modality: usize,
    pub bandset: usize,
    pub patch: usize,
    pub channels: usize,
    pub hidden: usize,
    pub width: usize,
    pub params: ProjectionParams,
}

impl Projection {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        mode: ProjectionMode,
        (modality, bandset): (usize, usize),
        channels: usize,
        patch: usize,
        hidden: usize,
        width: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pp = patch * patch;
        let params = match mode {
            ProjectionMode::Linear => ProjectionParams::Linear {
                w: store.xavier(format!("{prefix}.w"), pp * channels, width, rng),
                b: store.zeros(format!("{prefix}.b"), &[width], false),
            },
            ProjectionMode::Nonlinear => {
                if hidden == 0 {
                    return Err(Error::Config("nonlinear projection needs a positive hidden width".into()));
                }
                ProjectionParams::Nonlinear {
                    pixel_w: store.xavier(format!("{prefix}.pixel_w"), channels, hidden, rng),
                    pixel_b: store.zeros(format!("{prefix}.pixel_b"), &[hidden], false),
                    token_w: store.xavier(format!("{prefix}.token_w"), pp * hidden, width, rng),
                    token_b: store.zeros(format!("{prefix}.token_b"), &[width], false),
                }
            }
        };
        Ok(Self { modality, bandset, patch, channels, hidden, width, params })
    }

    pub fn mode(&self) -> ProjectionMode {
        match self.params {
            ProjectionParams::Linear { .. } => ProjectionMode::Linear,
            ProjectionParams::Nonlinear { .. } => ProjectionMode::Nonlinear,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self.params {
            ProjectionParams::Linear { w, b } => vec![w, b],
            ProjectionParams::Nonlinear { pixel_w, pixel_b, token_w, token_b } => vec![pixel_w, pixel_b, token_w, token_b],
        }
    }

    /// Multiply-accumulates to project one token.
    pub fn macs_per_token(&self) -> u64 {
        let pp = (self.patch * self.patch) as u64;
        match self.mode() {
            ProjectionMode::Linear => pp * self.channels as u64 * self.width as u64,
            ProjectionMode::Nonlinear => pp * (self.channels * self.hidden) as u64 + pp * (self.hidden * self.width) as u64,
        }
    }

    /// Projects `x: [n, P·P·C]` to `[n, D]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        match self.params {
            ProjectionParams::Linear { w, b } => Ok(tape.affine(x, bound[w], Some(bound[b]))?),
            ProjectionParams::Nonlinear { pixel_w, pixel_b, token_w, token_b } => {
                let n = tape.shape(x)[0];
                let pp = self.patch * self.patch;
                let pixels = tape.reshape(x, &[n * pp, self.channels])?;
                let hidden = tape.affine(pixels, bound[pixel_w], Some(bound[pixel_b]))?;
                let hidden = tape.relu(hidden);
                let per_token = tape.reshape(hidden, &[n, pp * self.hidden])?;
                Ok(tape.affine(per_token, bound[token_w], Some(bound[token_b]))?)
            }
        }
    }
}

/// Projections keyed by (modality, bandset).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProjectionSet {
    pub items: Vec<Projection>,
}

impl ProjectionSet {
    pub fn get(&self, modality: usize, bandset: usize) -> Option<&Projection> {
        self.items.iter().find(|p| p.modality == modality && p.bandset == bandset)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.items.iter().flat_map(Projection::param_ids).collect()
    }
}

/// Projects the selected tokens (global indices, ascending) to `[n, D]`
/// rows in selection order.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    patches: &PatchArray,
    grid: &TokenGrid,
    projections: &ProjectionSet,
    selection: &[usize],
) -> Result<Var> {
    if selection.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("token selection must be strictly ascending".into()));
    }
    let mut parts = Vec::new();
    let mut cursor = 0;
    for (g, group) in grid.groups().iter().enumerate() {
        let end = selection[cursor..].iter().position(|&t| t >= group.start + group.len).map_or(selection.len(), |o| cursor + o);
        let chosen = &selection[cursor..end];
        cursor = end;
        if chosen.is_empty() {
            continue;
        }
        let proj = projections
            .get(group.modality, group.bandset)
            .ok_or_else(|| Error::Config(format!("no projection for modality {} bandset {}", group.modality, group.bandset)))?;
        let width = grid.group_width(g);
        if proj.channels * proj.patch * proj.patch != width {
            return Err(Error::Config(format!("projection for group {g} expects {} inputs, patches have {width}", proj.channels * proj.patch * proj.patch)));
        }
        let src = &patches.groups[g];
        let mut data = Vec::with_capacity(chosen.len() * width);
        for &t in chosen {
            data.extend(src.row(t - group.start).iter().map(|&v| T::of(v as f64)));
        }
        let x = tape.constant(data, &[chosen.len(), width])?;
        parts.push(proj.forward(tape, bound, x)?);
    }
    if parts.is_empty() {
        return Err(Error::Config("empty token selection".into()));
    }
    Ok(if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? })
}

/// Direct strided convolution with `kernel = stride = P`; output `[D, Hp, Wp]`.
/// `weight` is `[D, C, P, P]`, `pixels` is `[C, H, W]`.
pub fn conv_patch_embed_reference<T: Scalar>(weight: &[T], pixels: &[T], (d, c, p): (usize, usize, usize), (h, w): (usize, usize)) -> Result<Vec<T>> {
    check_conv_dims(weight, pixels, (d, c, p), (h, w))?;
    let (hp, wp) = (h / p, w / p);
    let mut out = vec![T::zero(); d * hp * wp];
    for o in 0..d {
        for i in 0..hp {
            for j in 0..wp {
                let mut acc = T::zero();
                for ch in 0..c {
                    for u in 0..p {
                        for v in 0..p {
                            acc = acc + weight[((o * c + ch) * p + u) * p + v] * pixels[(ch * h + i * p + u) * w + j * p + v];
                        }
                    }
                }
                out[(o * hp + i) * wp + j] = acc;
            }
        }
    }
    Ok(out)
}

fn check_conv_dims<T>(weight: &[T], pixels: &[T], (d, c, p): (usize, usize, usize), (h, w): (usize, usize)) -> Result<()> {
    if d == 0 || c == 0 || p == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidDims("convolution extents must be positive".into()));
    }
    if h % p != 0 || w % p != 0 {
        return Err(Error::InvalidDims(format!("{h}x{w} is not divisible by patch size {p}")));
    }
    if weight.len() != d * c * p * p || pixels.len() != c * h * w {
        return Err(Error::InvalidDims("weight or pixel buffer length does not match extents".into()));
    }
    Ok(())
}

/// Reshapes a `[D, C, P, P]` convolution kernel into the `[C·P·P, D]` weight
/// of an equivalent affine map over `[c, u, v]`-ordered patch vectors.
pub fn conv_weight_to_linear<T: Scalar>(weight: &[T], (d, c, p): (usize, usize, usize)) -> Vec<T> {
    let k = c * p * p;
    let mut lin = vec![T::zero(); k * d];
    for o in 0..d {
        for r in 0..k {
            lin[r * d + o] = weight[o * k + r];
        }
    }
    lin
}

/// Patch embedding as reshape + affine. Returns tokens `[Hp·Wp, D]` (row-major
/// over the patch grid) and the reshaped `[C·P·P, D]` weight.
pub fn linear_patch_embed_from_conv<T: Scalar>(
    weight: &[T],
    pixels: &[T],
    (d, c, p): (usize, usize, usize),
    (h, w): (usize, usize),
) -> Result<(Vec<T>, Vec<T>)> {
    check_conv_dims(weight, pixels, (d, c, p), (h, w))?;
    let lin = conv_weight_to_linear(weight, (d, c, p));
    let (hp, wp) = (h / p, w / p);
    let k = c * p * p;
    let mut patches = vec![T::zero(); hp * wp * k];
    for i in 0..hp {
        for j in 0..wp {
            let row = &mut patches[(i * wp + j) * k..(i * wp + j + 1) * k];
            for ch in 0..c {
                for u in 0..p {
                    let src = (ch * h + i * p + u) * w + j * p;
                    row[(ch * p + u) * p..(ch * p + u + 1) * p].copy_from_slice(&pixels[src..src + p]);
                }
            }
        }
    }
    let mut tokens = vec![T::zero(); hp * wp * d];
    kernels::gemm_nn(&patches, &lin, &mut tokens, hp * wp, k, d);
    Ok((tokens, lin))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TokenCounts {
    pub per_modality: Vec<(String, usize)>,
    pub total: usize,
}

impl TokenCounts {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.per_modality.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }
}

/// Closed-form token counts: `Hp · Wp · T · B` per modality (`T = 1` for maps).
pub fn count_tokens(registry: &ModalityRegistry, dims: Dims, patch: usize, scheme: BandsetScheme) -> Result<TokenCounts> {
    dims.check_patch(patch)?;
    let (hp, wp) = (dims.h / patch, dims.w / patch);
    let per_modality: Vec<(String, usize)> = registry
        .specs()
        .iter()
        .map(|s| {
            let t = if s.is_map() { 1 } else { dims.t };
            (s.name.clone(), hp * wp * t * s.partition(scheme).len())
        })
        .collect();
    let total = per_modality.iter().map(|(_, c)| c).sum();
    Ok(TokenCounts { per_modality, total })
}

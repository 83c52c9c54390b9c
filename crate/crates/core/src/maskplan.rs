//! Per-token Visible / Target / Ignore assignment.
//!
//! v1 masks tokens at random and then draws a state per bandset, which drops
//! half of all map tokens. v1.1 keeps every map token as a target and picks
//! time masking with probability `p_t`, random masking otherwise.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Role;
use crate::error::{Error, Result};
use crate::seed;
use crate::tokenize::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenState {
    Visible,
    Target,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanKind {
    Random,
    Time,
    BandsetV1,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskPlan {
    pub states: Vec<TokenState>,
    pub kind: PlanKind,
    pub seed: u64,
    /// Target timesteps, for time-masked plans.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masked_timesteps: Option<Vec<usize>>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn count(&self, state: TokenState) -> usize {
        self.states.iter().filter(|&&s| s == state).count()
    }

    pub fn indices(&self, state: TokenState) -> Vec<usize> {
        self.states.iter().enumerate().filter(|(_, &s)| s == state).map(|(i, _)| i).collect()
    }

    pub fn visible(&self) -> Vec<usize> {
        self.indices(TokenState::Visible)
    }

    pub fn targets(&self) -> Vec<usize> {
        self.indices(TokenState::Target)
    }

    /// Checks alignment and the Visible / Target invariants.
    pub fn validate(&self, grid: &TokenGrid) -> Result<()> {
        if self.states.len() != grid.len() {
            return Err(Error::Mask(format!("plan has {} states for {} tokens", self.states.len(), grid.len())));
        }
        let mut visible = 0;
        let mut target = 0;
        for (i, &s) in self.states.iter().enumerate() {
            match s {
                TokenState::Visible if grid.role_of(i) == Role::TargetOnly => {
                    return Err(Error::Mask(format!("target-only token {i} marked visible")));
                }
                TokenState::Visible => visible += 1,
                TokenState::Target => target += 1,
                TokenState::Ignore => {}
            }
        }
        if visible == 0 {
            return Err(Error::Mask("no visible token".into()));
        }
        if target == 0 {
            return Err(Error::Mask("no target token".into()));
        }
        Ok(())
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

fn encode_decode_tokens(grid: &TokenGrid) -> Vec<usize> {
    (0..grid.len()).filter(|&i| grid.role_of(i) == Role::EncodeDecode).collect()
}

/// Exactly `⌊ratio·N⌉` (clamped to `[1, N−1]`) of the N encode-decode tokens
/// become Target via a seeded shuffle; the rest are Visible. Target-only
/// tokens are always Target.
pub fn random_mask(grid: &TokenGrid, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Mask(format!("masking ratio must lie in (0, 1), got {ratio}")));
    }
    let mut ed = encode_decode_tokens(grid);
    let n = ed.len();
    if n < 2 {
        return Err(Error::Mask(format!("random masking needs at least 2 encode-decode tokens, grid has {n}")));
    }
    let k = round_half_up(ratio * n as f64).clamp(1, n - 1);
    let mut rng = seed::rng(seed, &[0x4D41]);
    ed.shuffle(&mut rng);
    let mut states = vec![TokenState::Target; grid.len()];
    for &i in &ed[k..] {
        states[i] = TokenState::Visible;
    }
    Ok(MaskPlan { states, kind: PlanKind::Random, seed, masked_timesteps: None })
}

/// State a v1 bandset is drawn into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BandsetState {
    /// Tokens keep their random-mask state.
    Online,
    /// Only the masked tokens remain; unmasked ones are ignored.
    Target,
    /// Every token is ignored.
    Ignore,
}

/// Applies explicit per-group bandset states (indexed like `grid.groups()`;
/// entries for target-only groups are unused) and the v1 map suppression.
pub fn apply_bandset_states(grid: &TokenGrid, base: &MaskPlan, states: &[BandsetState], map_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if states.len() != grid.groups().len() || base.states.len() != grid.len() {
        return Err(Error::Mask("bandset states do not match the grid".into()));
    }
    let mut out = base.states.clone();
    let mut rng = seed::rng(seed, &[0x4D50]);
    for (g, group) in grid.groups().iter().enumerate() {
        let range = group.start..group.start + group.len;
        if group.role == Role::TargetOnly {
            // random masking over the map; the unmasked share is suppressed
            let mut idx: Vec<usize> = range.collect();
            idx.shuffle(&mut rng);
            // stochastic rounding keeps the expected suppressed share exact
            let want = map_ratio * idx.len() as f64;
            let k = (want.floor() as usize + (rng.random::<f64>() < want.fract()) as usize).min(idx.len());
            for (r, &i) in idx.iter().enumerate() {
                out[i] = if r < k { TokenState::Target } else { TokenState::Ignore };
            }
            continue;
        }
        match states[g] {
            BandsetState::Online => {}
            BandsetState::Target => {
                for s in &mut out[range] {
                    if *s == TokenState::Visible {
                        *s = TokenState::Ignore;
                    }
                }
            }
            BandsetState::Ignore => out[range].fill(TokenState::Ignore),
        }
    }
    Ok(MaskPlan { states: out, kind: PlanKind::BandsetV1, seed, masked_timesteps: None })
}

/// v1 bandset-level masking: each encode-decode bandset draws a state
/// uniformly from {online, target, ignore}, redrawn until the plan keeps a
/// visible token and a target token.
pub fn bandset_mask_v1(grid: &TokenGrid, base: &MaskPlan, map_ratio: f64, seed: u64) -> Result<MaskPlan> {
    const STATES: [BandsetState; 3] = [BandsetState::Online, BandsetState::Target, BandsetState::Ignore];
    for attempt in 0..256u64 {
        let mut rng = seed::rng(seed, &[0x4253, attempt]);
        let states: Vec<BandsetState> =
            grid.groups().iter().map(|g| if g.role == Role::EncodeDecode { STATES[rng.random_range(0..3)] } else { BandsetState::Ignore }).collect();
        let any_online = grid.groups().iter().zip(&states).any(|(g, s)| g.role == Role::EncodeDecode && *s == BandsetState::Online);
        if !any_online {
            continue;
        }
        let plan = apply_bandset_states(grid, base, &states, map_ratio, seed)?;
        if plan.validate(grid).is_ok() {
            return Ok(plan);
        }
    }
    Err(Error::Mask("could not draw bandset states with a visible and a target token".into()))
}

/// Masks a uniformly sized, nonempty proper subset of timesteps.
/// With a single timestep this falls back to random masking at ratio 0.5.
pub fn time_mask(grid: &TokenGrid, seed: u64) -> Result<MaskPlan> {
    let t = grid.dims.t;
    if t < 2 {
        log::debug!("time masking needs T >= 2, falling back to random masking");
        return random_mask(grid, 0.5, seed);
    }
    let mut rng = seed::rng(seed, &[0x544D]);
    let m = rng.random_range(1..t);
    let mut steps: Vec<usize> = (0..t).collect();
    steps.shuffle(&mut rng);
    let mut masked = steps[..m].to_vec();
    masked.sort_unstable();
    let states = grid
        .tokens()
        .iter()
        .enumerate()
        .map(|(i, rec)| if grid.role_of(i) == Role::TargetOnly || masked.contains(&rec.t) { TokenState::Target } else { TokenState::Visible })
        .collect();
    Ok(MaskPlan { states, kind: PlanKind::Time, seed, masked_timesteps: Some(masked) })
}

/// v1.1 plan: all map tokens Target; time masking with probability `p_t`,
/// random masking at `ratio` otherwise.
pub fn plan_v11(grid: &TokenGrid, p_t: f64, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&p_t) {
        return Err(Error::Mask(format!("p_t must lie in [0, 1], got {p_t}")));
    }
    let mut rng = seed::rng(seed, &[0x5631]);
    let use_time = rng.random::<f64>() < p_t;
    let mut plan = if use_time { time_mask(grid, seed::derive(seed, &[1]))? } else { random_mask(grid, ratio, seed::derive(seed, &[2]))? };
    plan.seed = seed;
    Ok(plan)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskingStrategy {
    V1,
    V11,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingConfig {
    pub strategy: MaskingStrategy,
    pub ratio: f64,
    pub p_t: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { strategy: MaskingStrategy::V11, ratio: 0.5, p_t: 0.5 }
    }
}

impl MaskingConfig {
    pub fn v1() -> Self {
        Self { strategy: MaskingStrategy::V1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("masking.ratio must lie in (0, 1), got {}", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.p_t) {
            return Err(Error::Config(format!("masking.p_t must lie in [0, 1], got {}", self.p_t)));
        }
        Ok(())
    }

    pub fn plan(&self, grid: &TokenGrid, seed: u64) -> Result<MaskPlan> {
        let plan = match self.strategy {
            MaskingStrategy::V11 => plan_v11(grid, self.p_t, self.ratio, seed)?,
            MaskingStrategy::V1 => {
                let base = random_mask(grid, self.ratio, seed)?;
                bandset_mask_v1(grid, &base, self.ratio, seed)?
            }
        };
        plan.validate(grid)?;
        Ok(plan)
    }
}

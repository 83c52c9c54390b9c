//! Modality catalog and seeded synthetic multimodal, multitemporal scenes.
//!
//! A scene is driven by a hidden land-cover field: `K` smooth random fields
//! whose argmax gives a per-pixel class and whose softmax gives mixing weights.
//! Observation bands are class-specific spectral signatures mixed by those
//! weights, plus a seasonal term whose frequency is the scene's temporal class,
//! plus per-scene gain/offset nuisance and pixel noise. Map modalities are
//! deterministic functions of the hidden fields.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    /// Seen by the encoder and usable as a reconstruction target.
    EncodeDecode,
    /// Only ever used to build loss targets.
    TargetOnly,
}

/// How a modality's bands are grouped into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BandsetScheme {
    /// Resolution-grouped bandsets (several tokens per patch).
    MultiBandset,
    /// All bands of a modality in one token.
    SingleBandset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    /// Spectral bands for observations; 1 (class id) for maps.
    pub bands: usize,
    pub role: Role,
    /// Resolution-grouped band indices used by [`BandsetScheme::MultiBandset`].
    pub bandset_partition: Vec<Vec<usize>>,
    pub resolution_tag: String,
    /// Category count for map modalities.
    pub num_classes: Option<usize>,
}

impl ModalitySpec {
    pub fn observation(name: &str, bands: usize, partition: Vec<Vec<usize>>, resolution_tag: &str) -> Self {
        Self {
            name: name.to_string(),
            bands,
            role: Role::EncodeDecode,
            bandset_partition: partition,
            resolution_tag: resolution_tag.to_string(),
            num_classes: None,
        }
    }

    pub fn map(name: &str, num_classes: usize, resolution_tag: &str) -> Self {
        Self {
            name: name.to_string(),
            bands: 1,
            role: Role::TargetOnly,
            bandset_partition: vec![vec![0]],
            resolution_tag: resolution_tag.to_string(),
            num_classes: Some(num_classes),
        }
    }

    pub fn is_map(&self) -> bool {
        self.num_classes.is_some()
    }

    /// Channels a token of this modality carries per pixel (one-hot width for maps).
    pub fn token_channels(&self) -> usize {
        self.num_classes.unwrap_or(self.bands)
    }

    /// Band groups under `scheme`. Maps always form a single group over their
    /// one-hot channels.
    pub fn partition(&self, scheme: BandsetScheme) -> Vec<Vec<usize>> {
        match (self.num_classes, scheme) {
            (Some(n), _) => vec![(0..n).collect()],
            (None, BandsetScheme::MultiBandset) => self.bandset_partition.clone(),
            (None, BandsetScheme::SingleBandset) => vec![(0..self.bands).collect()],
        }
    }

    fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.bands];
        for &b in self.bandset_partition.iter().flatten() {
            if b >= self.bands || seen[b] {
                return Err(Error::Config(format!("{}: bandset partition must cover each band exactly once", self.name)));
            }
            seen[b] = true;
        }
        if seen.iter().any(|s| !s) || self.bandset_partition.iter().any(Vec::is_empty) {
            return Err(Error::Config(format!("{}: bandset partition leaves bands uncovered", self.name)));
        }
        match (self.role, self.num_classes) {
            (Role::TargetOnly, Some(n)) if n >= 1 => Ok(()),
            (Role::EncodeDecode, None) => Ok(()),
            _ => Err(Error::Config(format!("{}: maps must be target-only with a class count", self.name))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRegistry {
    specs: Vec<ModalitySpec>,
}

impl ModalityRegistry {
    pub fn new(specs: Vec<ModalitySpec>) -> Result<Self> {
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if specs[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate modality `{}`", s.name)));
            }
        }
        if !specs.iter().any(|s| s.role == Role::EncodeDecode) {
            return Err(Error::Config("registry needs at least one encode-decode modality".into()));
        }
        Ok(Self { specs })
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ModalitySpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    /// Keeps the named modalities, in registry order.
    pub fn subset(&self, names: &[impl AsRef<str>]) -> Result<Self> {
        for n in names {
            if self.get(n.as_ref()).is_none() {
                return Err(Error::UnknownModality(n.as_ref().to_string()));
            }
        }
        let specs = self.specs.iter().filter(|s| names.iter().any(|n| n.as_ref() == s.name)).cloned().collect();
        Self::new(specs)
    }

    /// Overrides the class count of a map modality.
    pub fn with_map_classes(mut self, name: &str, classes: usize) -> Result<Self> {
        let spec = self.specs.iter_mut().find(|s| s.name == name).ok_or_else(|| Error::UnknownModality(name.into()))?;
        if !spec.is_map() || classes == 0 {
            return Err(Error::Config(format!("{name}: class count applies to map modalities and must be positive")));
        }
        spec.num_classes = Some(classes);
        Ok(self)
    }
}

impl std::ops::Index<&str> for ModalityRegistry {
    type Output = ModalitySpec;

    fn index(&self, name: &str) -> &ModalitySpec {
        self.get(name).unwrap_or_else(|| panic!("unknown modality `{name}`"))
    }
}

/// Three satellite observation modalities and six derived maps.
///
/// Sentinel-2 band order is B01 B02 B03 B04 B05 B06 B07 B08 B8A B09 B11 B12;
/// its resolution bandsets are 10 m {B02,B03,B04,B08}, 20 m
/// {B05,B06,B07,B8A,B11,B12} and 60 m {B01,B09}. Landsat band order is B1..B11
/// with the 15 m panchromatic B8 in its own bandset.
pub fn default_registry() -> ModalityRegistry {
    let specs = vec![
        ModalitySpec::observation("S1", 2, vec![vec![0, 1]], "10m"),
        ModalitySpec::observation("S2", 12, vec![vec![1, 2, 3, 7], vec![4, 5, 6, 8, 10, 11], vec![0, 9]], "10m/20m/60m"),
        ModalitySpec::observation("Landsat", 11, vec![vec![0, 1, 2, 3, 4, 5, 6, 8, 9, 10], vec![7]], "30m/15m"),
        ModalitySpec::map("WorldCover", 8, "10m"),
        ModalitySpec::map("WorldCereal", 2, "10m"),
        ModalitySpec::map("SRTM", 8, "30m"),
        ModalitySpec::map("OpenStreetMap", 2, "10m"),
        ModalitySpec::map("CDL", 8, "30m"),
        ModalitySpec::map("CanopyHeight", 2, "10m"),
    ];
    ModalityRegistry::new(specs).expect("default registry is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::InvalidDims(format!("T, H and W must be positive, got {self:?}")));
        }
        Ok(())
    }

    /// Checks H and W are multiples of `patch`.
    pub fn check_patch(&self, patch: usize) -> Result<()> {
        self.validate()?;
        if patch == 0 || !self.h.is_multiple_of(patch) || !self.w.is_multiple_of(patch) {
            return Err(Error::InvalidDims(format!("H={} and W={} must be multiples of patch size {patch}", self.h, self.w)));
        }
        Ok(())
    }
}

/// One modality's values, row-major `[T, H, W, C]`. Maps store class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityArray {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl ModalityArray {
    pub fn zeros(t: usize, h: usize, w: usize, c: usize) -> Self {
        Self { t, h, w, c, data: vec![0.0; t * h * w * c] }
    }

    #[inline]
    pub fn at(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data[((t * self.h + y) * self.w + x) * self.c + c]
    }

    #[inline]
    pub fn set(&mut self, t: usize, y: usize, x: usize, c: usize, v: f32) {
        self.data[((t * self.h + y) * self.w + x) * self.c + c] = v;
    }
}

/// Hidden generator state kept for label derivation.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub num_classes: usize,
    /// Land-cover class per pixel, row-major `[H, W]`.
    pub class_map: Vec<u8>,
    /// Soft class membership per pixel, `[H, W, K]`.
    pub weights: Vec<f32>,
    /// Fraction of pixels per class.
    pub composition: Vec<f32>,
    pub temporal_class: usize,
    /// Seasonal phase offset in radians.
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub dims: Dims,
    pub timesteps: Vec<u32>,
    /// Aligned with the registry that generated the scene.
    pub arrays: Vec<ModalityArray>,
    pub latent: LatentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Hidden land-cover classes (`K`).
    pub latent_classes: usize,
    /// Coarse lattice size of the smooth random fields.
    pub coarse_grid: usize,
    /// Multiplier on the hidden fields; 0 gives a degenerate constant scene.
    pub latent_scale: f64,
    /// Spread of per-scene class biases (controls composition variety).
    pub composition_spread: f64,
    /// Softmax sharpness of the mixing weights.
    pub sharpness: f64,
    pub noise_std: f64,
    /// Log-normal sigma of the per-scene gain.
    pub gain_std: f64,
    pub offset_std: f64,
    pub temporal_amplitude: f64,
    /// Seed of the fixed spectral signatures shared by all scenes.
    pub world_seed: u64,
    /// Standardize each band to mean 0 / variance 1 using calibration stats.
    pub standardize: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_classes: 4,
            coarse_grid: 3,
            latent_scale: 1.0,
            composition_spread: 0.6,
            sharpness: 4.0,
            noise_std: 0.3,
            gain_std: 0.2,
            offset_std: 0.2,
            temporal_amplitude: 0.5,
            world_seed: 0x0E_1AB,
            standardize: true,
        }
    }
}

impl GeneratorConfig {
    /// All hidden variation switched off: constant bands, single-class maps.
    pub fn degenerate() -> Self {
        Self { latent_scale: 0.0, composition_spread: 0.0, noise_std: 0.0, gain_std: 0.0, offset_std: 0.0, temporal_amplitude: 0.0, ..Self::default() }
    }
}

/// Seasonal angular frequency of a temporal class, in radians per timestep.
/// Classes `0..4` cover `0, π/3, 2π/3, π`; a single frame carries no
/// information about it because the phase is uniform.
pub fn seasonal_frequency(temporal_class: usize) -> f64 {
    temporal_class as f64 * PI / 3.0
}

pub const TEMPORAL_CLASSES: usize = 4;

#[derive(Debug, Clone)]
struct ModalityParams {
    /// `[K][C]` class spectral signatures.
    signature: Vec<Vec<f64>>,
    /// `[K][C]` seasonal response amplitudes.
    seasonal: Vec<Vec<f64>>,
    /// `[2][C]` responses to the two secondary fields.
    secondary: Vec<Vec<f64>>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

/// Seeded scene factory for a fixed registry.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    registry: ModalityRegistry,
    cfg: GeneratorConfig,
    params: Vec<Option<ModalityParams>>,
}

struct Fields {
    class_map: Vec<u8>,
    weights: Vec<f32>,
    secondary: [Vec<f64>; 2],
    composition: Vec<f32>,
}

impl SceneGenerator {
    pub fn new(registry: ModalityRegistry, cfg: GeneratorConfig) -> Result<Self> {
        if cfg.latent_classes < 2 || cfg.latent_classes > u8::MAX as usize || cfg.coarse_grid == 0 {
            return Err(Error::Config("generator needs 2..=255 latent classes and a positive coarse grid".into()));
        }
        let k = cfg.latent_classes;
        let mut rng = seed::rng(cfg.world_seed, &[0xC0DE]);
        let mut normal = |scale: f64| -> f64 { scale * rng.sample::<f64, _>(StandardNormal) };
        let params = registry
            .specs()
            .iter()
            .map(|s| {
                (!s.is_map()).then(|| ModalityParams {
                    signature: (0..k).map(|_| (0..s.bands).map(|_| normal(1.5)).collect()).collect(),
                    seasonal: (0..k).map(|_| (0..s.bands).map(|_| normal(1.0)).collect()).collect(),
                    secondary: (0..2).map(|_| (0..s.bands).map(|_| normal(0.3)).collect()).collect(),
                    mean: vec![0.0; s.bands],
                    std: vec![1.0; s.bands],
                })
            })
            .collect();
        let mut gen = Self { registry, cfg, params };
        if gen.cfg.standardize {
            gen.calibrate();
        }
        Ok(gen)
    }

    pub fn with_defaults(registry: ModalityRegistry) -> Self {
        Self::new(registry, GeneratorConfig::default()).expect("default generator config is valid")
    }

    pub fn registry(&self) -> &ModalityRegistry {
        &self.registry
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Class-`k` spectral signature value of `band` before nuisance and
    /// standardization.
    pub fn signature(&self, modality: usize, class: usize, band: usize) -> Option<f64> {
        self.params.get(modality)?.as_ref().map(|p| p.signature[class][band])
    }

    /// Per-band (mean, std) used for standardization.
    pub fn band_stats(&self, modality: usize) -> Option<(&[f64], &[f64])> {
        self.params.get(modality)?.as_ref().map(|p| (p.mean.as_slice(), p.std.as_slice()))
    }

    fn calibrate(&mut self) {
        let dims = Dims::new(2, 16, 16);
        let scenes: Vec<Scene> = (0..16).map(|i| self.generate_raw(dims, seed::derive(self.cfg.world_seed, &[0xCA1, i]), None)).collect();
        for (m, p) in self.params.iter_mut().enumerate() {
            let Some(p) = p else { continue };
            for b in 0..p.mean.len() {
                let vals = scenes.iter().flat_map(|s| {
                    let a = &s.arrays[m];
                    a.data.iter().skip(b).step_by(a.c).map(|&v| v as f64)
                });
                let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
                for v in vals {
                    n += 1.0;
                    sum += v;
                    sq += v * v;
                }
                let mean = sum / n;
                let std = (sq / n - mean * mean).max(0.0).sqrt();
                p.mean[b] = mean;
                p.std[b] = if std > 1e-6 { std } else { 1.0 };
            }
        }
    }

    pub fn generate_scene(&self, dims: Dims, seed: u64) -> Result<Scene> {
        dims.validate()?;
        Ok(self.generate_raw(dims, seed, None))
    }

    /// Like [`generate_scene`](Self::generate_scene) but with the temporal
    /// class fixed; every other random draw is unchanged.
    pub fn generate_scene_with_temporal_class(&self, dims: Dims, seed: u64, temporal_class: usize) -> Result<Scene> {
        dims.validate()?;
        if temporal_class >= TEMPORAL_CLASSES {
            return Err(Error::Config(format!("temporal class {temporal_class} out of range")));
        }
        Ok(self.generate_raw(dims, seed, Some(temporal_class)))
    }

    fn smooth_field(&self, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
        let g = self.cfg.coarse_grid;
        let coarse: Vec<f64> = (0..(g + 1) * (g + 1)).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            let fy = (y as f64 + 0.5) / h as f64 * g as f64;
            let (y0, ty) = ((fy.floor() as usize).min(g - 1), fy - (fy.floor()).min((g - 1) as f64));
            for x in 0..w {
                let fx = (x as f64 + 0.5) / w as f64 * g as f64;
                let (x0, tx) = ((fx.floor() as usize).min(g - 1), fx - (fx.floor()).min((g - 1) as f64));
                let c = |yy: usize, xx: usize| coarse[yy * (g + 1) + xx];
                let top = c(y0, x0) * (1.0 - tx) + c(y0, x0 + 1) * tx;
                let bot = c(y0 + 1, x0) * (1.0 - tx) + c(y0 + 1, x0 + 1) * tx;
                out[y * w + x] = top * (1.0 - ty) + bot * ty;
            }
        }
        out
    }

    fn fields(&self, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Fields {
        let k = self.cfg.latent_classes;
        let scale = self.cfg.latent_scale;
        let mut logits = vec![0.0; h * w * k];
        for c in 0..k {
            let bias = self.cfg.composition_spread * rng.sample::<f64, _>(StandardNormal);
            let f = self.smooth_field(rng, h, w);
            for p in 0..h * w {
                logits[p * k + c] = scale * (f[p] + bias);
            }
        }
        let secondary =
            [self.smooth_field(rng, h, w).into_iter().map(|v| v * scale).collect(), self.smooth_field(rng, h, w).into_iter().map(|v| v * scale).collect()];
        let mut class_map = vec![0u8; h * w];
        let mut weights = vec![0f32; h * w * k];
        let mut composition = vec![0f32; k];
        for p in 0..h * w {
            let row = &logits[p * k..(p + 1) * k];
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            class_map[p] = best as u8;
            composition[best] += 1.0;
            let max = row[best];
            let z: f64 = row.iter().map(|&v| (self.cfg.sharpness * (v - max)).exp()).sum();
            for c in 0..k {
                weights[p * k + c] = ((self.cfg.sharpness * (row[c] - max)).exp() / z) as f32;
            }
        }
        composition.iter_mut().for_each(|c| *c /= (h * w) as f32);
        Fields { class_map, weights, secondary, composition }
    }

    fn generate_raw(&self, dims: Dims, scene_seed: u64, force_temporal: Option<usize>) -> Scene {
        let Dims { t, h, w } = dims;
        let k = self.cfg.latent_classes;
        let mut field_rng = seed::rng(scene_seed, &[1]);
        let fields = self.fields(&mut field_rng, h, w);
        let mut temporal_rng = seed::rng(scene_seed, &[2]);
        let phase = temporal_rng.random_range(0.0..2.0 * PI);
        let drawn_class = temporal_rng.random_range(0..TEMPORAL_CLASSES);
        let temporal_class = force_temporal.unwrap_or(drawn_class);
        let omega = seasonal_frequency(temporal_class);
        let seasonal: Vec<f64> = (0..t).map(|ti| self.cfg.temporal_amplitude * (phase + omega * ti as f64).sin()).collect();

        let mut arrays = Vec::with_capacity(self.registry.len());
        for (m, spec) in self.registry.specs().iter().enumerate() {
            let mut nuisance = seed::rng(scene_seed, &[3, m as u64]);
            match (&self.params[m], spec.num_classes) {
                (Some(p), _) => {
                    let c = spec.bands;
                    let gain = (self.cfg.gain_std * nuisance.sample::<f64, _>(StandardNormal)).exp();
                    let offsets: Vec<f64> = (0..c).map(|_| self.cfg.offset_std * nuisance.sample::<f64, _>(StandardNormal)).collect();
                    let mut noise = seed::rng(scene_seed, &[4, m as u64]);
                    let mut arr = ModalityArray::zeros(t, h, w, c);
                    for y in 0..h {
                        for x in 0..w {
                            let px = y * w + x;
                            let wts = &fields.weights[px * k..(px + 1) * k];
                            for b in 0..c {
                                let mut base = 0.0;
                                let mut season = 0.0;
                                for cl in 0..k {
                                    base += wts[cl] as f64 * p.signature[cl][b];
                                    season += wts[cl] as f64 * p.seasonal[cl][b];
                                }
                                base += fields.secondary[0][px] * p.secondary[0][b] + fields.secondary[1][px] * p.secondary[1][b];
                                for ti in 0..t {
                                    let eps = if self.cfg.noise_std > 0.0 { self.cfg.noise_std * noise.sample::<f64, _>(StandardNormal) } else { 0.0 };
                                    let raw = gain * (base + seasonal[ti] * season) + offsets[b] + eps;
                                    arr.set(ti, y, x, b, ((raw - p.mean[b]) / p.std[b]) as f32);
                                }
                            }
                        }
                    }
                    arrays.push(arr);
                }
                (None, Some(n)) => {
                    let mut arr = ModalityArray::zeros(1, h, w, 1);
                    for y in 0..h {
                        for x in 0..w {
                            let px = y * w + x;
                            let cls = map_class(&spec.name, n, k, fields.class_map[px] as usize, fields.secondary[0][px], fields.secondary[1][px]);
                            arr.set(0, y, x, 0, cls as f32);
                        }
                    }
                    arrays.push(arr);
                }
                (None, None) => unreachable!("observation modalities always carry parameters"),
            }
        }
        Scene {
            dims,
            timesteps: (0..t as u32).collect(),
            arrays,
            latent: LatentState {
                num_classes: k,
                class_map: fields.class_map,
                weights: fields.weights,
                composition: fields.composition,
                temporal_class,
                phase,
            },
        }
    }

    pub fn generate_task_dataset(&self, kind: TaskKind, n: usize, dims: Dims, patch: usize, seed: u64) -> Result<LabeledDataset> {
        if n == 0 {
            return Err(Error::Config("dataset size must be positive".into()));
        }
        dims.check_patch(patch)?;
        let k = self.cfg.latent_classes;
        let items = (0..n)
            .map(|i| {
                let scene = self.generate_raw(dims, seed::derive(seed, &[0xDA7A, i as u64]), None);
                let label = match kind {
                    TaskKind::SceneClass => Label::Class(scene_class(&scene.latent)),
                    TaskKind::TemporalClass => Label::Class(scene.latent.temporal_class),
                    TaskKind::PatchSeg => Label::Segmentation(patch_labels(&scene.latent, dims, patch)),
                };
                (scene, label)
            })
            .collect();
        let num_classes = match kind {
            TaskKind::SceneClass | TaskKind::PatchSeg => k,
            TaskKind::TemporalClass => TEMPORAL_CLASSES,
        };
        Ok(LabeledDataset { kind, num_classes, patch_size: patch, dims, items })
    }
}

/// Map categories as functions of the hidden class and two secondary fields.
fn map_class(name: &str, n: usize, k: usize, class: usize, z1: f64, z2: f64) -> usize {
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let bin = |z: f64, levels: usize| ((sig(z) * levels as f64) as usize).min(levels - 1);
    let v = match name {
        "WorldCereal" => usize::from(class == 2 % k),
        "OpenStreetMap" => usize::from(class == 3 % k && z1 > 0.0),
        "CanopyHeight" => usize::from(class == 1 && z2 > -0.5),
        "SRTM" => bin(z2, n),
        _ => {
            let sub = (n / k).max(1);
            class * sub + bin(z1, sub)
        }
    };
    v.min(n - 1)
}

/// Dominant hidden class; ties resolve to the lowest index.
pub fn scene_class(latent: &LatentState) -> usize {
    let mut best = 0;
    for (c, &f) in latent.composition.iter().enumerate() {
        if f > latent.composition[best] {
            best = c;
        }
    }
    best
}

/// Mode of the hidden class inside each `patch × patch` cell, row-major over
/// the patch grid; ties resolve to the lowest class.
pub fn patch_labels(latent: &LatentState, dims: Dims, patch: usize) -> Vec<usize> {
    let (hp, wp) = (dims.h / patch, dims.w / patch);
    let mut out = Vec::with_capacity(hp * wp);
    for i in 0..hp {
        for j in 0..wp {
            let mut counts = vec![0usize; latent.num_classes];
            for y in i * patch..(i + 1) * patch {
                for x in j * patch..(j + 1) * patch {
                    counts[latent.class_map[y * dims.w + x] as usize] += 1;
                }
            }
            let mut best = 0;
            for c in 1..counts.len() {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Generates one scene with the default generator for `registry`.
pub fn generate_scene(registry: &ModalityRegistry, dims: Dims, seed: u64) -> Result<Scene> {
    SceneGenerator::with_defaults(registry.clone()).generate_scene(dims, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    SceneClass,
    PatchSeg,
    TemporalClass,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::SceneClass, TaskKind::PatchSeg, TaskKind::TemporalClass];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::SceneClass => "SceneClass",
            TaskKind::PatchSeg => "PatchSeg",
            TaskKind::TemporalClass => "TemporalClass",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown task `{s}` (expected SceneClass, PatchSeg or TemporalClass)")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    /// One class per spatial patch, row-major over the patch grid.
    Segmentation(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub kind: TaskKind,
    pub num_classes: usize,
    pub patch_size: usize,
    pub dims: Dims,
    pub items: Vec<(Scene, Label)>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

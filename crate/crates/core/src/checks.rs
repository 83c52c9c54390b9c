//! Finite-difference gradient checks over every tape op and the full
//! two-view loss, on small f64 problems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{default_registry, BandsetScheme, Dims, SceneGenerator};
use crate::error::{Error, Result};
use crate::losses::{two_view_loss, ContrastiveConfig};
use crate::model::{Model, ModelConfig, TargetProjection, ViewSettings};
use crate::numerics::{finite_difference_check, multi_head_attention, scaled_dot_attention, CoordSelection, DiffArray, ShapeError, Tape, Var};
use crate::params::Bound;
use crate::tokenize::{patchify_on, ProjectionMode};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn rand_array(shape: &[usize], seed: u64) -> DiffArray<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    DiffArray::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).expect("shape matches")
}

/// Weighted sum with fixed pseudo-random weights, so upstream gradients are
/// not uniform.
fn probe(tape: &mut Tape<f64>, y: Var) -> std::result::Result<Var, ShapeError> {
    let n = tape.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.731 + 0.2).sin()).collect();
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(w, &shape)?;
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn run<F>(name: String, f: F, inputs: &[DiffArray<f64>]) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> std::result::Result<Var, ShapeError>,
{
    let r = finite_difference_check(f, inputs, 1e-5, CoordSelection::All)?;
    Ok(CheckResult { name, max_rel_error: r.max_rel_error, checked: r.checked })
}

/// One check per op at each `(n, d)` shape.
pub fn op_checks(shapes: &[(usize, usize)]) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (k, &(n, d)) in shapes.iter().enumerate() {
        let s = 100 * k as u64;
        let x = rand_array(&[n, d], s + 1);
        let y = rand_array(&[n, d], s + 2);
        let w = rand_array(&[d, d + 1], s + 3);
        let b = rand_array(&[d + 1], s + 4);
        let row = rand_array(&[d], s + 5);
        let gamma = rand_array(&[d], s + 6);
        let q = rand_array(&[n, d], s + 7);
        let kk = rand_array(&[n, d], s + 8);
        let v = rand_array(&[n, d], s + 9);
        let tag = |op: &str| format!("{op} {n}x{d}");
        let xy = [x.clone(), y.clone()];
        out.push(run(
            tag("affine"),
            |t, v| {
                let y = t.affine(v[0], v[1], Some(v[2]))?;
                probe(t, y)
            },
            &[x.clone(), w.clone(), b.clone()],
        )?);
        out.push(run(
            tag("matmul"),
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y)
            },
            &[x.clone(), w.clone()],
        )?);
        out.push(run(
            tag("matmul_nt"),
            |t, v| {
                let y = t.matmul_nt(v[0], v[1])?;
                probe(t, y)
            },
            &xy,
        )?);
        out.push(run(
            tag("add"),
            |t, v| {
                let y = t.add(v[0], v[1])?;
                probe(t, y)
            },
            &xy,
        )?);
        out.push(run(
            tag("add_row"),
            |t, v| {
                let y = t.add_row(v[0], v[1])?;
                probe(t, y)
            },
            &[x.clone(), row.clone()],
        )?);
        out.push(run(
            tag("mul"),
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                probe(t, y)
            },
            &xy,
        )?);
        out.push(run(
            tag("scale"),
            |t, v| {
                let y = t.scale(v[0], -1.7);
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("relu"),
            |t, v| {
                let y = t.relu(v[0]);
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("gelu"),
            |t, v| {
                let y = t.gelu(v[0]);
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("layer_norm"),
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe(t, y)
            },
            &[x.clone(), gamma.clone(), row.clone()],
        )?);
        out.push(run(
            tag("softmax_rows"),
            |t, v| {
                let y = t.softmax(v[0], 1)?;
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("softmax_cols"),
            |t, v| {
                let y = t.softmax(v[0], 0)?;
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("l2_normalize"),
            |t, v| {
                let y = t.l2_normalize_rows(v[0], 1e-8)?;
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("slice_cols"),
            |t, v| {
                let y = t.slice_cols(v[0], 1, d - 1)?;
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("concat_cols"),
            |t, v| {
                let y = t.concat_cols(&[v[0], v[1]])?;
                probe(t, y)
            },
            &xy,
        )?);
        out.push(run(
            tag("concat_rows"),
            |t, v| {
                let y = t.concat_rows(&[v[0], v[1]])?;
                probe(t, y)
            },
            &xy,
        )?);
        out.push(run(
            tag("gather_rows"),
            |t, v| {
                let y = t.gather_rows(v[0], &[n - 1, 0, n - 1])?;
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("reshape"),
            |t, v| {
                let y = t.reshape(v[0], &[d, n])?;
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("mean_rows"),
            |t, v| {
                let y = t.mean_rows(v[0])?;
                probe(t, y)
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("masked_cross_entropy"),
            |t, v| {
                let targets: Vec<usize> = (0..n).map(|r| r % d).collect();
                let mask: Vec<bool> = (0..n * d).map(|i| i % 3 != 1).collect();
                t.masked_cross_entropy(v[0], &targets, Some(&mask))
            },
            std::slice::from_ref(&x),
        )?);
        out.push(run(
            tag("weighted_sum"),
            |t, v| {
                let a = t.sum(v[0]);
                let b = t.sum(v[1]);
                t.weighted_sum(&[(a, 0.3), (b, -2.0)])
            },
            &xy,
        )?);
        let qkv = [q.clone(), kk.clone(), v.clone()];
        out.push(run(
            tag("attention"),
            |t, v| {
                let y = scaled_dot_attention(t, v[0], v[1], v[2], None)?;
                probe(t, y)
            },
            &qkv,
        )?);
        if d % 2 == 0 {
            out.push(run(
                tag("multi_head_attention"),
                |t, v| {
                    let y = multi_head_attention(t, v[0], v[1], v[2], 2, None)?;
                    probe(t, y)
                },
                &qkv,
            )?);
        }
    }
    Ok(out)
}

fn as_shape_error(e: Error) -> ShapeError {
    match e {
        Error::Shape(s) => s,
        other => ShapeError::Mismatch { op: "model", detail: other.to_string() },
    }
}

/// Two-view loss of a toy encoder/decoder with respect to every parameter
/// (a seeded sample of coordinates per tensor).
pub fn two_view_loss_check(projection: ProjectionMode, per_input: usize) -> Result<CheckResult> {
    let cfg = ModelConfig {
        width: 8,
        encoder_depth: 1,
        decoder_depth: 1,
        decoder_width: 8,
        heads: 2,
        mlp_ratio: 2,
        patch_size: 4,
        projection,
        hidden: 3,
        scheme: BandsetScheme::SingleBandset,
        target_projection: TargetProjection::FrozenCopy,
    };
    let dims = Dims::new(2, 8, 8);
    let reg = default_registry().subset(&["S1", "S2", "WorldCover"])?;
    let model = Model::<f64>::new(cfg, reg.clone(), 7)?;
    let gen = SceneGenerator::with_defaults(reg.clone());
    let grid = model.grid(dims)?;
    let patches = (0..2).map(|s| patchify_on(&gen.generate_scene(dims, s)?, &reg, &grid)).collect::<Result<Vec<_>>>()?;
    let views = ViewSettings::default();
    let loss_cfg = ContrastiveConfig::default();
    let inputs: Vec<DiffArray<f64>> = model.store.iter().map(|(_, p)| DiffArray::new(p.data.clone(), &p.shape)).collect::<std::result::Result<_, _>>()?;
    let r = finite_difference_check(
        |tape, vars| {
            let bound = Bound::from_vars(vars.to_vec());
            let batch = model.forward_two_views(tape, &bound, &grid, &patches, &views, 5).map_err(as_shape_error)?;
            Ok(two_view_loss(tape, &batch, &loss_cfg).map_err(as_shape_error)?.total)
        },
        &inputs,
        1e-6,
        CoordSelection::Sample { per_input, seed: 2 },
    )?;
    Ok(CheckResult { name: format!("two_view_loss {projection:?}"), max_rel_error: r.max_rel_error, checked: r.checked })
}

/// Every op at three shapes plus the two-view loss under both projections.
pub fn full_suite() -> Result<Vec<CheckResult>> {
    let mut out = op_checks(&[(2, 3), (3, 5), (5, 8)])?;
    for mode in [ProjectionMode::Linear, ProjectionMode::Nonlinear] {
        out.push(two_view_loss_check(mode, 3)?);
    }
    Ok(out)
}

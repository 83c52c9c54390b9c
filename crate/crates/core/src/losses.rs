//! Modality patch discrimination with hard-negative filtering, instance-level
//! InfoNCE, and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TwoViewBatch;
use crate::numerics::{Scalar, Tape, Var};

const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossVariant {
    /// Same-modality negatives only.
    V1,
    /// Same-modality negatives, minus near-duplicates of the target in decode-only modalities.
    MaskedNegatives,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub tau_token: f64,
    pub tau_inst: f64,
    pub s_max: f64,
    pub lambda: f64,
    pub variant: LossVariant,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { tau_token: 0.1, tau_inst: 0.1, s_max: 0.999, lambda: 0.05, variant: LossVariant::MaskedNegatives }
    }
}

impl ContrastiveConfig {
    pub fn v1() -> Self {
        Self { lambda: 0.1, variant: LossVariant::V1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_token > 0.0 && self.tau_inst > 0.0) {
            return Err(Error::Config("loss temperatures must be positive".into()));
        }
        if !(self.s_max > 0.0 && self.s_max <= 1.0) {
            return Err(Error::Config(format!("loss.s_max must lie in (0, 1], got {}", self.s_max)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Similarity threshold in force, if any.
    pub fn threshold(&self) -> Option<f64> {
        match self.variant {
            LossVariant::V1 => None,
            LossVariant::MaskedNegatives => Some(self.s_max),
        }
    }
}

/// Cosine similarity with a norm floor; a zero vector has cosine 0 to everything.
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    ab / (aa.sqrt().max(NORM_EPS) * bb.sqrt().max(NORM_EPS))
}

/// Row-major `[N, N]` negative admissibility for row-major `targets: [N, d]`.
/// `(i, j)` is admissible iff `i ≠ j`, both tokens share a modality and, when
/// that modality is decode-only and a threshold is given, `cos(t_i, t_j) < s_max`.
pub fn filter_hard_negatives<T: Scalar>(targets: &[T], d: usize, modality: &[usize], decode_only: &[bool], s_max: Option<f64>) -> Vec<bool> {
    let n = modality.len();
    debug_assert_eq!(targets.len(), n * d);
    let row = |i: usize| &targets[i * d..(i + 1) * d];
    let mut out = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || modality[i] != modality[j] {
                continue;
            }
            out[i * n + j] = match s_max {
                Some(s) if decode_only[modality[i]] => cosine(row(i), row(j)) < s,
                _ => true,
            };
        }
    }
    out
}

/// Mean over rows of the InfoNCE term with the aligned target as positive and
/// the admissible targets as negatives, on cosine similarities over `τ`.
pub fn patch_discrimination<T: Scalar>(tape: &mut Tape<T>, preds: Var, targets: Var, admissible: &[bool], tau: f64) -> Result<Var> {
    let n = tape.shape(preds)[0];
    if tape.value(preds).iter().chain(tape.value(targets)).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what: "patch discrimination input", step: 0 });
    }
    let p = tape.l2_normalize_rows(preds, T::of(NORM_EPS))?;
    let t = tape.l2_normalize_rows(targets, T::of(NORM_EPS))?;
    let sims = tape.matmul_nt(p, t)?;
    let logits = tape.scale(sims, T::of(1.0 / tau));
    let diag: Vec<usize> = (0..n).collect();
    Ok(tape.masked_cross_entropy(logits, &diag, Some(admissible))?)
}

/// Per-row terms of [`patch_discrimination`], evaluated directly.
pub fn patch_discrimination_rows<T: Scalar>(preds: &[T], targets: &[T], d: usize, admissible: &[bool], tau: f64) -> Vec<f64> {
    let n = preds.len() / d;
    (0..n)
        .map(|i| {
            let p = &preds[i * d..(i + 1) * d];
            let logit = |j: usize| cosine(p, &targets[j * d..(j + 1) * d]) / tau;
            let cols: Vec<usize> = (0..n).filter(|&j| j == i || admissible[i * n + j]).collect();
            let max = cols.iter().map(|&j| logit(j)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = cols.iter().map(|&j| (logit(j) - max).exp()).sum();
            z.ln() + max - logit(i)
        })
        .collect()
}

/// Symmetric InfoNCE between the two views' pooled vectors `[B, D]`; other
/// instances in the batch are the negatives.
pub fn instance_infonce<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var, tau: f64) -> Result<Var> {
    let n = tape.shape(a)[0];
    if n < 2 {
        log::warn!("instance contrast needs at least 2 instances, got {n}; contributing 0");
        return Ok(tape.constant(vec![T::zero()], &[1])?);
    }
    let an = tape.l2_normalize_rows(a, T::of(NORM_EPS))?;
    let bn = tape.l2_normalize_rows(b, T::of(NORM_EPS))?;
    let diag: Vec<usize> = (0..n).collect();
    let ab = tape.matmul_nt(an, bn)?;
    let ab = tape.scale(ab, T::of(1.0 / tau));
    let ba = tape.matmul_nt(bn, an)?;
    let ba = tape.scale(ba, T::of(1.0 / tau));
    let l_ab = tape.masked_cross_entropy(ab, &diag, None)?;
    let l_ba = tape.masked_cross_entropy(ba, &diag, None)?;
    Ok(tape.weighted_sum(&[(l_ab, T::of(0.5)), (l_ba, T::of(0.5))])?)
}

pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, token: Var, instance: Var, lambda: f64) -> Result<Var> {
    Ok(tape.weighted_sum(&[(token, T::one()), (instance, T::of(lambda))])?)
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub token: Var,
    pub instance: Var,
    pub total: Var,
}

/// Token loss averaged over every target token of both views (negatives are
/// drawn within each sample), plus `λ` times the instance loss.
pub fn two_view_loss<T: Scalar>(tape: &mut Tape<T>, batch: &TwoViewBatch<T>, cfg: &ContrastiveConfig) -> Result<LossParts> {
    let total_targets: usize = batch.views.iter().flatten().map(|s| s.target_modality.len()).sum();
    let mut terms = Vec::new();
    for sample in batch.views.iter().flatten() {
        let n = sample.target_modality.len();
        let targets = tape.constant(sample.targets.clone(), &[n, batch.width])?;
        let admissible = filter_hard_negatives(&sample.targets, batch.width, &sample.target_modality, &batch.decode_only, cfg.threshold());
        let l = patch_discrimination(tape, sample.preds, targets, &admissible, cfg.tau_token)?;
        terms.push((l, T::of(n as f64 / total_targets as f64)));
    }
    let token = tape.weighted_sum(&terms)?;
    let instance = instance_infonce(tape, batch.pooled[0], batch.pooled[1], cfg.tau_inst)?;
    let total = total_loss(tape, token, instance, cfg.lambda)?;
    Ok(LossParts { token, instance, total })
}

/// Fraction of ordered same-modality target pairs whose cosine is ≥ `s`.
pub fn duplicate_rate<T: Scalar>(targets: &[T], d: usize, modality: &[usize], s: f64) -> f64 {
    let n = modality.len();
    let (mut dup, mut pairs) = (0usize, 0usize);
    for i in 0..n {
        for j in 0..n {
            if i != j && modality[i] == modality[j] {
                pairs += 1;
                dup += (cosine(&targets[i * d..(i + 1) * d], &targets[j * d..(j + 1) * d]) >= s) as usize;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        dup as f64 / pairs as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, CoordSelection, DiffArray};
    use rand::Rng;

    /// Straight enumeration of the per-token InfoNCE.
    fn pd_oracle(p: &[f64], t: &[f64], d: usize, adm: &[bool], tau: f64) -> f64 {
        let n = p.len() / d;
        let mut total = 0.0;
        for i in 0..n {
            let pi = &p[i * d..(i + 1) * d];
            let pos = (cosine(pi, &t[i * d..(i + 1) * d]) / tau).exp();
            let mut denom = pos;
            for j in 0..n {
                if adm[i * n + j] {
                    denom += (cosine(pi, &t[j * d..(j + 1) * d]) / tau).exp();
                }
            }
            total += -(pos / denom).ln();
        }
        total / n as f64
    }

    fn inst_oracle(a: &[f64], b: &[f64], d: usize, tau: f64) -> f64 {
        let n = a.len() / d;
        let one_way = |x: &[f64], y: &[f64]| {
            let mut s = 0.0;
            for i in 0..n {
                let num = (cosine(&x[i * d..(i + 1) * d], &y[i * d..(i + 1) * d]) / tau).exp();
                let den: f64 = (0..n).map(|j| (cosine(&x[i * d..(i + 1) * d], &y[j * d..(j + 1) * d]) / tau).exp()).sum();
                s += -(num / den).ln();
            }
            s / n as f64
        };
        0.5 * (one_way(a, b) + one_way(b, a))
    }

    fn pd(p: &[f64], t: &[f64], d: usize, adm: &[bool], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let n = p.len() / d;
        let pv = tape.constant(p.to_vec(), &[n, d]).unwrap();
        let tv = tape.constant(t.to_vec(), &[n, d]).unwrap();
        let l = patch_discrimination(&mut tape, pv, tv, adm, tau).unwrap();
        tape.scalar(l)
    }

    fn inst(a: &[f64], b: &[f64], d: usize, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let n = a.len() / d;
        let av = tape.constant(a.to_vec(), &[n, d]).unwrap();
        let bv = tape.constant(b.to_vec(), &[n, d]).unwrap();
        let l = instance_infonce(&mut tape, av, bv, tau).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn filter_examples() {
        let t = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
        let adm = filter_hard_negatives(&t, 2, &[1, 1, 1], &[false, true], Some(0.999));
        assert!(!adm[1] && !adm[3]);
        assert!(adm[2] && adm[5]);
        let cross = filter_hard_negatives(&t, 2, &[0, 1, 1], &[false, false], Some(0.999));
        assert!(!cross[1] && !cross[3]);
        // encode-decode modalities skip the similarity test
        let ed = filter_hard_negatives(&t, 2, &[0, 0, 0], &[false], Some(0.999));
        assert!(ed[1] && ed[3]);
        assert!((0..3).all(|i| !ed[i * 3 + i]));
    }

    #[test]
    fn filter_is_monotone_in_threshold() {
        let mut rng = crate::seed::rng(1, &[]);
        let t: Vec<f64> = (0..8 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = [0, 0, 0, 0, 0, 0, 1, 1];
        let mut last = usize::MAX;
        for s in [1.0, 0.9, 0.5, 0.0, -0.5] {
            let c = filter_hard_negatives(&t, 3, &m, &[true, true], Some(s)).iter().filter(|&&a| a).count();
            assert!(c <= last);
            last = c;
        }
    }

    #[test]
    fn patch_discrimination_closed_forms() {
        assert_eq!(pd(&[1.0, 2.0], &[3.0, 1.0], 2, &[false], 0.1), 0.0);
        let l = pd(&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0], 2, &[false, true, true, false], 1.0);
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((want - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn losses_match_enumeration_oracles() {
        let mut rng = crate::seed::rng(2, &[]);
        for n in 1..=8 {
            let d = 5;
            let p: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let m: Vec<usize> = (0..n).map(|i| i % 2).collect();
            for adm in [vec![true; n * n], filter_hard_negatives(&t, d, &m, &[false, true], Some(0.5))] {
                let mut adm = adm;
                (0..n).for_each(|i| adm[i * n + i] = false);
                assert!((pd(&p, &t, d, &adm, 0.1) - pd_oracle(&p, &t, d, &adm, 0.1)).abs() < 1e-6);
            }
        }
        for b in 2..=5 {
            let d = 4;
            let a: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert!((inst(&a, &c, d, 0.1) - inst_oracle(&a, &c, d, 0.1)).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_closed_forms() {
        let a = [1.0, 0.0, 0.0, 1.0];
        let want = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((inst(&a, &a, 2, 1.0) - want).abs() < 1e-12);
        let same = [0.3, 0.4, 0.3, 0.4, 0.3, 0.4];
        assert!((inst(&same, &same, 2, 0.1) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(inst(&[1.0, 2.0], &[2.0, 1.0], 2, 0.1), 0.0);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let tok = tape.constant(vec![1.0], &[1]).unwrap();
        let ins = tape.constant(vec![2.0], &[1]).unwrap();
        let t = total_loss(&mut tape, tok, ins, 0.05).unwrap();
        assert!((tape.scalar(t) - 1.1).abs() < 1e-12);
        let t0 = total_loss(&mut tape, tok, ins, 0.0).unwrap();
        assert_eq!(tape.scalar(t0), 1.0);
        assert_eq!(ContrastiveConfig::v1().lambda, 0.1);
        assert_eq!(ContrastiveConfig::default().lambda, 0.05);
    }

    #[test]
    fn cross_modality_removal_leaves_other_rows_unchanged() {
        let mut rng = crate::seed::rng(3, &[]);
        let (d, n) = (4, 6);
        let p: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m = [0, 0, 0, 1, 1, 1];
        let adm = filter_hard_negatives(&t, d, &m, &[false, true], Some(0.999));
        let full = patch_discrimination_rows(&p, &t, d, &adm, 0.1);
        assert!((full.iter().sum::<f64>() / n as f64 - pd(&p, &t, d, &adm, 0.1)).abs() < 1e-12);
        for drop in 3..6 {
            let keep: Vec<usize> = (0..n).filter(|&i| i != drop).collect();
            let sub = |v: &[f64]| keep.iter().flat_map(|&i| v[i * d..(i + 1) * d].to_vec()).collect::<Vec<_>>();
            let mk: Vec<usize> = keep.iter().map(|&i| m[i]).collect();
            let adm_k = filter_hard_negatives(&sub(&t), d, &mk, &[false, true], Some(0.999));
            let rows = patch_discrimination_rows(&sub(&p), &sub(&t), d, &adm_k, 0.1);
            assert_eq!(rows[..3], full[..3]);
        }
    }

    #[test]
    fn all_water_batch_is_finite() {
        let d = 3;
        let n = 6;
        let t = vec![0.5; n * d];
        let m = vec![1; n];
        let adm = filter_hard_negatives(&t, d, &m, &[false, true], Some(0.999));
        assert!(adm.iter().all(|&a| !a));
        let p: Vec<f64> = (0..n * d).map(|i| (i as f64).sin()).collect();
        let report = finite_difference_check(
            |tape, v| {
                let tv = tape.constant(t.clone(), &[n, d])?;
                patch_discrimination(tape, v[0], tv, &adm, 0.1).map_err(|e| match e {
                    Error::Shape(s) => s,
                    _ => unreachable!(),
                })
            },
            &[DiffArray::new(p.clone(), &[n, d]).unwrap()],
            1e-6,
            CoordSelection::All,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4);
        // v1 (unfiltered) on the same batch stays finite too
        let all: Vec<bool> = (0..n * n).map(|k| k / n != k % n).collect();
        assert!(pd(&p, &t, d, &all, 0.1).is_finite());
        // zero-vector targets are finite as well
        assert!(pd(&p, &vec![0.0; n * d], d, &all, 0.1).is_finite());
    }

    #[test]
    fn instance_gradient_check() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin()).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64 * 0.4).cos()).collect();
        let report = finite_difference_check(
            |tape, v| {
                instance_infonce(tape, v[0], v[1], 0.1).map_err(|e| match e {
                    Error::Shape(s) => s,
                    _ => unreachable!(),
                })
            },
            &[DiffArray::new(a, &[3, 4]).unwrap(), DiffArray::new(b, &[3, 4]).unwrap()],
            1e-6,
            CoordSelection::All,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}

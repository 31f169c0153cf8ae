//! Post-hoc power-law averaging of saved checkpoints.
//!
//! The checkpoint taken at step `t` gets weight `β(t) = (1 − 1/(t+1))^{1+α}`,
//! normalized over the list, so later checkpoints always weigh more.
//! Norm-preserving tensors are averaged in ambient space and then pushed
//! back onto the sphere row by row.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::manifold::retract_in_place;
use crate::numcore::Matrix;
use crate::optim::{ParamKind, ParamTensor};

/// Default averaging exponent.
pub const DEFAULT_ALPHA: f64 = 6.22;

/// `(1 − 1/(t+1))^{1+α}`; requires `α ≥ 0`.
pub fn beta(t: u64, alpha: f64) -> f64 {
    debug_assert!(alpha >= 0.0);
    ((1.0 + alpha) * (-1.0 / (t as f64 + 1.0)).ln_1p()).exp()
}

/// A named set of tensors saved at one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRef {
    pub step: u64,
    pub params: BTreeMap<String, Matrix>,
    /// Names of tensors whose rows live on the unit sphere.
    pub norm_preserving: BTreeSet<String>,
}

impl CheckpointRef {
    pub fn from_params(step: u64, params: &[ParamTensor]) -> Self {
        Self {
            step,
            params: params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            norm_preserving: params
                .iter()
                .filter(|p| p.kind == ParamKind::NormPreserving)
                .map(|p| p.name.clone())
                .collect(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (step, params) = checkpoint::load(dir)?;
        Ok(Self::from_params(step, &params))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "alpha must be finite and >= 0, got {alpha}"
        )))
    }
}

/// Normalized weights for `steps`, in the given order.
pub fn normalized_weights(steps: &[u64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if steps.is_empty() {
        return Err(Error::contract("need at least one checkpoint"));
    }
    let raw: Vec<f64> = steps.iter().map(|&t| beta(t, alpha)).collect();
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract(
            "all checkpoints have zero weight (only step 0)",
        ));
    }
    Ok(raw.into_iter().map(|b| b / total).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightEntry {
    pub step: u64,
    pub beta: f64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined {
    pub params: BTreeMap<String, Matrix>,
    pub norm_preserving: BTreeSet<String>,
    /// Per-checkpoint weights, by increasing step.
    pub weights: Vec<WeightEntry>,
}

/// Weighted average of `checkpoints` under `β(·, alpha)`.
///
/// Order of the input does not matter. A single checkpoint is returned as is.
pub fn combine(checkpoints: &[CheckpointRef], alpha: f64) -> Result<Combined> {
    check_alpha(alpha)?;
    let mut sorted: Vec<&CheckpointRef> = checkpoints.iter().collect();
    sorted.sort_by_key(|c| c.step);
    let first = *sorted
        .first()
        .ok_or_else(|| Error::contract("combine needs at least one checkpoint"))?;
    for pair in sorted.windows(2) {
        if pair[0].step == pair[1].step {
            return Err(Error::contract(format!(
                "two checkpoints share step {}",
                pair[0].step
            )));
        }
    }
    for c in &sorted[1..] {
        for (name, m) in &first.params {
            let other = c.params.get(name).ok_or_else(|| {
                Error::Config(format!(
                    "parameter `{name}` missing from checkpoint at step {}",
                    c.step
                ))
            })?;
            other.expect_shape(
                m.rows(),
                m.cols(),
                &format!("parameter `{name}` at step {}", c.step),
            )?;
        }
        if let Some(extra) = c.params.keys().find(|k| !first.params.contains_key(*k)) {
            return Err(Error::Config(format!(
                "parameter `{extra}` at step {} is absent from step {}",
                c.step, first.step
            )));
        }
    }

    if sorted.len() == 1 {
        return Ok(Combined {
            params: first.params.clone(),
            norm_preserving: first.norm_preserving.clone(),
            weights: vec![WeightEntry {
                step: first.step,
                beta: beta(first.step, alpha),
                weight: 1.0,
            }],
        });
    }

    let steps: Vec<u64> = sorted.iter().map(|c| c.step).collect();
    let w = normalized_weights(&steps, alpha)?;
    let names: Vec<&String> = first.params.keys().collect();
    let averaged = names
        .par_iter()
        .map(|&name| {
            let shape = first.params[name].shape();
            let mut acc = Matrix::zeros(shape.0, shape.1);
            for (c, &wi) in sorted.iter().zip(&w) {
                acc.axpy(wi, &c.params[name]);
            }
            if first.norm_preserving.contains(name) {
                for i in 0..acc.rows() {
                    retract_in_place(acc.row_mut(i), &format!("averaged `{name}` row {i}"))?;
                }
            }
            Ok((name.clone(), acc))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Combined {
        params: averaged,
        norm_preserving: first.norm_preserving.clone(),
        weights: steps
            .iter()
            .zip(&w)
            .map(|(&step, &weight)| WeightEntry {
                step,
                beta: beta(step, alpha),
                weight,
            })
            .collect(),
    })
}

impl Combined {
    /// Averaged tensors laid out like `template`, keeping its names, kinds
    /// and learning rates; optimizer moments are reset.
    pub fn to_params(&self, template: &[ParamTensor]) -> Result<Vec<ParamTensor>> {
        template
            .iter()
            .map(|t| {
                let value = self.params.get(&t.name).ok_or_else(|| {
                    Error::Config(format!("parameter `{}` missing from combined set", t.name))
                })?;
                let mut p = ParamTensor::new(t.name.clone(), value.clone(), t.kind);
                p.lr_multiplier = t.lr_multiplier;
                Ok(p)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaRow {
    pub alpha: f64,
    pub loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub best_alpha: f64,
    pub best_loss: f64,
    pub table: Vec<AlphaRow>,
}

/// Combines at every alpha and keeps the one with the lowest `eval` loss.
///
/// An alpha whose combination or evaluation fails, or whose loss is not
/// finite, is recorded and excluded. Ties go to the earlier alpha.
pub fn sweep_alpha<F>(
    checkpoints: &[CheckpointRef],
    alphas: &[f64],
    mut eval: F,
) -> Result<AlphaSweep>
where
    F: FnMut(&Combined) -> Result<f64>,
{
    if alphas.is_empty() {
        return Err(Error::contract("sweep_alpha needs at least one alpha"));
    }
    let mut table = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let res = combine(checkpoints, alpha)
            .and_then(|c| eval(&c))
            .and_then(|l| {
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(Error::Divergence { step: 0, loss: l })
                }
            });
        table.push(AlphaRow {
            alpha,
            loss: res.as_ref().ok().copied(),
            error: res.err().map(|e| e.to_string()),
        });
    }
    let best = table
        .iter()
        .filter_map(|r| r.loss.map(|l| (r.alpha, l)))
        .fold(None, |best: Option<(f64, f64)>, (a, l)| match best {
            Some((_, bl)) if bl <= l => best,
            _ => Some((a, l)),
        })
        .ok_or_else(|| Error::Config("every alpha failed to evaluate".into()))?;
    Ok(AlphaSweep {
        best_alpha: best.0,
        best_loss: best.1,
        table,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::max_row_norm_deviation;
    use crate::numcore::{matmul, RngStream};
    use proptest::prelude::*;

    fn ckpt(step: u64, values: &[(&str, Matrix)], np: &[&str]) -> CheckpointRef {
        CheckpointRef {
            step,
            params: values
                .iter()
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
            norm_preserving: np.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn beta_values() {
        assert_eq!(beta(0, 0.0), 0.0);
        assert_eq!(beta(0, 6.22), 0.0);
        assert!(close(beta(1, 0.0), 0.5, 1e-15));
        assert!(close(beta(10, 0.0), 10.0 / 11.0, 1e-15));
        // oracle: (1/2)^7.22
        assert!(close(beta(1, 6.22), 0.006_707_542_472_169_951_3, 1e-13));
        assert!(close(beta(10, 6.22), 0.502_510_120_884_915_9, 1e-13));
        assert!(close(beta(1_000_000, 6.22), 0.999_992_780_029_674_1, 1e-13));
    }

    #[test]
    fn single_checkpoint_unchanged() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let c = ckpt(0, &[("w", m.clone())], &["w"]);
        let out = combine(&[c], 6.22).unwrap();
        assert_eq!(out.params["w"], m);
        assert_eq!(out.weights[0].weight, 1.0);
    }

    #[test]
    fn identical_checkpoints_reproduce_themselves() {
        let mut rng = RngStream::new(4);
        let s = Matrix::from_fn(3, 5, |_, _| rng.normal());
        let u = crate::manifold::sphere_init(4, 3, &rng.derive(1))
            .unwrap()
            .into_inner();
        let list: Vec<_> = [100u64, 250, 900, 4000]
            .iter()
            .map(|&t| ckpt(t, &[("s", s.clone()), ("u", u.clone())], &["u"]))
            .collect();
        let out = combine(&list, 6.22).unwrap();
        assert!(out.params["s"].sub(&s).max_abs() <= 1e-15);
        assert!(out.params["u"].sub(&u).max_abs() <= 1e-15);
        let total: f64 = out.weights.iter().map(|w| w.weight).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn two_checkpoint_weights_locked() {
        let a = ckpt(1000, &[("w", Matrix::filled(1, 1, 0.0))], &[]);
        let b = ckpt(2000, &[("w", Matrix::filled(1, 1, 1.0))], &[]);
        let out = combine(&[b, a], 6.22).unwrap();
        // oracle: β(1000)/β(2000) = 0.99639920386672332308
        assert!(close(
            out.weights[0].beta / out.weights[1].beta,
            0.996_399_203_866_723_3,
            1e-13
        ));
        assert!(close(out.weights[0].weight, 0.499_098_177_326_883_7, 1e-13));
        assert!(close(
            out.params["w"][(0, 0)],
            0.500_901_822_673_116_3,
            1e-13
        ));
    }

    #[test]
    fn weights_increase_with_step() {
        let steps: Vec<u64> = (1..50).map(|i| i * 37).collect();
        let w = normalized_weights(&steps, DEFAULT_ALPHA).unwrap();
        assert!(w.windows(2).all(|p| p[0] < p[1]));
    }

    #[test]
    fn norm_preserving_rows_are_retracted() {
        let a = ckpt(
            10,
            &[("u", Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap())],
            &["u"],
        );
        let b = ckpt(
            20,
            &[("u", Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap())],
            &["u"],
        );
        let out = combine(&[a, b], 0.0).unwrap();
        assert!(max_row_norm_deviation(&out.params["u"]) <= 1e-12);
        assert!(out.params["u"][(0, 1)] > out.params["u"][(0, 0)]);
    }

    #[test]
    fn errors() {
        assert!(combine(&[], 1.0).is_err());
        let a = ckpt(1, &[("w", Matrix::zeros(2, 2))], &[]);
        let b = ckpt(2, &[("w", Matrix::zeros(2, 3))], &[]);
        match combine(&[a.clone(), b], 1.0) {
            Err(Error::Shape { context, .. }) => assert!(context.contains("`w`")),
            other => panic!("{other:?}"),
        }
        let c = ckpt(2, &[("v", Matrix::zeros(2, 2))], &[]);
        assert!(matches!(combine(&[a.clone(), c], 1.0), Err(Error::Config(m)) if m.contains('w')));
        assert!(combine(&[a.clone(), a.clone()], 1.0).is_err());
        assert!(combine(&[a], -1.0).is_err());
    }

    #[test]
    fn sweep_cases() {
        let a = ckpt(10, &[("w", Matrix::filled(1, 1, 0.0))], &[]);
        let b = ckpt(20, &[("w", Matrix::filled(1, 1, 1.0))], &[]);
        let list = [a, b];
        let one = sweep_alpha(&list, &[3.0], |c| Ok(c.params["w"][(0, 0)])).unwrap();
        assert_eq!(one.best_alpha, 3.0);

        // the combined value rises with alpha, so its negation falls
        let alphas = [0.0, 1.0, 2.0, 4.0, 8.0];
        let s = sweep_alpha(&list, &alphas, |c| Ok(-c.params["w"][(0, 0)])).unwrap();
        assert_eq!(s.best_alpha, 8.0);

        // quadratic with optimum at w = 0.6, against a direct scan
        let grid: Vec<f64> = (0..41).map(|i| i as f64 * 0.25).collect();
        let f = |w: f64| (w - 0.6) * (w - 0.6);
        let s = sweep_alpha(&list, &grid, |c| Ok(f(c.params["w"][(0, 0)]))).unwrap();
        let brute = grid
            .iter()
            .map(|&a| (a, f(combine(&list, a).unwrap().params["w"][(0, 0)])))
            .fold(
                (f64::NAN, f64::INFINITY),
                |b, x| if x.1 < b.1 { x } else { b },
            );
        assert_eq!(s.best_alpha, brute.0);

        let cutoff = combine(&list, 1.5).unwrap().weights[1].weight;
        let failing = sweep_alpha(&list, &[1.0, 2.0], |c| {
            if c.weights[1].weight > cutoff {
                Err(Error::Config("boom".into()))
            } else {
                Ok(1.0)
            }
        })
        .unwrap();
        assert_eq!(failing.best_alpha, 1.0);
        assert!(failing.table[1].error.is_some());
        assert!(sweep_alpha(&list, &[], |_| Ok(0.0)).is_err());
    }

    proptest! {
        #[test]
        fn beta_monotone(t in 1u64..1_000_000, alpha in 0.0f64..20.0) {
            prop_assert!(beta(t + 1, alpha) > beta(t, alpha));
            prop_assert!(beta(t, alpha + 0.5) < beta(t, alpha));
        }

        #[test]
        fn order_invariant_and_linear(seed in 0u64..1000, alpha in 0.0f64..10.0) {
            let mut rng = RngStream::new(seed);
            let steps = [5u64, 50, 120, 700];
            let list: Vec<_> = steps
                .iter()
                .map(|&t| ckpt(t, &[("w", Matrix::from_fn(3, 4, |_, _| rng.normal()))], &[]))
                .collect();
            let mut rev = list.clone();
            rev.reverse();
            let a = combine(&list, alpha).unwrap();
            let b = combine(&rev, alpha).unwrap();
            prop_assert_eq!(&a.params, &b.params);

            let map = Matrix::from_fn(4, 2, |_, _| rng.normal());
            let mapped: Vec<_> = list
                .iter()
                .map(|c| ckpt(c.step, &[("w", matmul(&c.params["w"], &map).unwrap())], &[]))
                .collect();
            let lhs = combine(&mapped, alpha).unwrap().params["w"].clone();
            let rhs = matmul(&a.params["w"], &map).unwrap();
            prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * rhs.max_abs().max(1.0));
        }
    }
}

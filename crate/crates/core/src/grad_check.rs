//! Central-difference verification of analytic gradients.
//!
//! Callers run their own forward+backward first so the store's grad slots
//! hold the analytic gradients, then hand a pure loss closure here. Each
//! trainable tensor is probed on a seeded random subsample of coordinates.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckOpts {
    pub step: f64,
    pub tol: f64,
    /// A coordinate also passes when |analytic - fd| falls below this floor.
    /// Central differences carry ~1e-11 of f64 rounding noise through a full
    /// forward pass, so structurally-zero gradients (e.g. the key-projection
    /// bias, which softmax cancels exactly) cannot meet a pure relative
    /// criterion. 1e-9 stays far below any gradient that matters while
    /// letting agreement-at-noise-level count as agreement.
    pub abs_tol: f64,
    /// Coordinates probed per tensor (capped at the tensor size).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        GradCheckOpts {
            step: 1e-5,
            tol: 1e-4,
            abs_tol: 1e-9,
            samples_per_tensor: 16,
            seed: 0x9d5c,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn worst(&self) -> Option<&GradCheckRow> {
        self.rows
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare the analytic gradients already stored in `params` against central
/// finite differences of `loss_fn`. Parameter values are restored exactly.
pub fn grad_check<F>(loss_fn: F, params: &mut ParamStore, opts: &GradCheckOpts) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let names = params.names();
    let mut rng = Rng::new(opts.seed);
    let mut rows = Vec::new();

    for name in names {
        if !params.get(&name)?.trainable {
            continue;
        }
        let numel = params.get(&name)?.value.numel();
        let analytic = params.get(&name)?.grad.clone();

        let mut coords: Vec<usize> = (0..numel).collect();
        if numel > opts.samples_per_tensor {
            rng.shuffle(&mut coords);
            coords.truncate(opts.samples_per_tensor);
        }

        let mut max_rel = 0.0f64;
        for &idx in &coords {
            let original = params.get(&name)?.value.data()[idx];

            params.get_mut(&name)?.value.data_mut()[idx] = original + opts.step;
            let loss_plus = loss_fn(&*params)?;
            params.get_mut(&name)?.value.data_mut()[idx] = original - opts.step;
            let loss_minus = loss_fn(&*params)?;
            params.get_mut(&name)?.value.data_mut()[idx] = original;

            if !loss_plus.is_finite() || !loss_minus.is_finite() {
                return Err(Error::NonFiniteLoss { param: name });
            }

            let fd = (loss_plus - loss_minus) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            if (a - fd).abs() <= opts.abs_tol {
                continue;
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }

        rows.push(GradCheckRow {
            pass: max_rel <= opts.tol,
            max_rel_err: max_rel,
            name,
        });
    }

    Ok(GradCheckReport {
        rows,
        tol: opts.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    #[test]
    fn linear_loss_gradient_is_exact() {
        // loss = sum(W x) for fixed x; dL/dW[i][j] = x[j]
        let mut rng = Rng::new(3);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::randn(&[3, 4], 1.0, &mut rng));

        // analytic gradient: each row of dW is x
        let mut g = Tensor::zeros(&[3, 4]);
        for i in 0..3 {
            for j in 0..4 {
                g.set2(i, j, x.data()[j]);
            }
        }
        store.get_mut("w").unwrap().grad = g;

        let loss = |p: &ParamStore| -> Result<f64> {
            let w = p.value("w");
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..4 {
                    acc += w.at2(i, j) * x.data()[j];
                }
            }
            Ok(acc)
        };

        let report = grad_check(loss, &mut store, &GradCheckOpts::default()).unwrap();
        assert!(report.all_pass());
        assert!(report.worst().unwrap().max_rel_err < 1e-8);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // deliberately store 2x the true gradient; the check must fail
        let mut rng = Rng::new(4);
        let x = Tensor::randn(&[4], 1.0, &mut rng);
        let mut store = ParamStore::new();
        store.insert("w", Tensor::randn(&[1, 4], 1.0, &mut rng));

        let mut g = Tensor::zeros(&[1, 4]);
        for j in 0..4 {
            g.set2(0, j, 2.0 * x.data()[j]);
        }
        store.get_mut("w").unwrap().grad = g;

        let loss = |p: &ParamStore| -> Result<f64> {
            let w = p.value("w");
            Ok((0..4).map(|j| w.at2(0, j) * x.data()[j]).sum())
        };

        let report = grad_check(loss, &mut store, &GradCheckOpts::default()).unwrap();
        assert!(!report.all_pass());
    }

    #[test]
    fn non_finite_loss_names_the_parameter() {
        let mut store = ParamStore::new();
        store.insert("theta", Tensor::filled(&[1], 1.0));
        let loss = |p: &ParamStore| -> Result<f64> {
            let v = p.value("theta").data()[0];
            // blows up as soon as the checker perturbs theta
            if (v - 1.0).abs() > 1e-9 {
                Ok(f64::NAN)
            } else {
                Ok(v)
            }
        };
        let err = grad_check(loss, &mut store, &GradCheckOpts::default()).unwrap_err();
        match err {
            Error::NonFiniteLoss { param } => assert_eq!(param, "theta"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn values_are_restored_after_check() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.25, -0.5, 3.0]));
        let before = store.value("w").clone();
        let loss = |p: &ParamStore| -> Result<f64> { Ok(p.value("w").sum()) };
        store.get_mut("w").unwrap().grad = Tensor::filled(&[3], 1.0);
        grad_check(loss, &mut store, &GradCheckOpts::default()).unwrap();
        assert_eq!(store.value("w"), &before);
    }

    #[test]
    fn frozen_entries_are_skipped() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::filled(&[1], 1.0));
        store.insert("b", Tensor::filled(&[1], 1.0));
        store.set_trainable_prefix("b", false);
        store.get_mut("a").unwrap().grad = Tensor::filled(&[1], 1.0);
        let loss = |p: &ParamStore| -> Result<f64> { Ok(p.value("a").sum() + p.value("b").sum()) };
        let report = grad_check(loss, &mut store, &GradCheckOpts::default()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].name, "a");
    }
}

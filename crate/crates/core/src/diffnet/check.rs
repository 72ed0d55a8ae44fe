//! Finite-difference gradient oracle.
//!
//! Independent of the reverse-mode path: it only evaluates the forward
//! function at perturbed inputs and compares against central differences.

use ndarray::ArrayD;

use super::{DiffTensor, Graph};
use crate::error::Result;

/// Central finite-difference gradient of a scalar function of several
/// tensor inputs, with respect to input `idx`.
pub fn finite_diff_grad<F>(inputs: &[ArrayD<f64>], idx: usize, eps: f64, f: F) -> ArrayD<f64>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(inputs[idx].raw_dim());
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for i in 0..grad.len() {
        let base = inputs[idx].as_slice().unwrap()[i];
        work[idx].as_slice_mut().unwrap()[i] = base + eps;
        let fp = f(&work);
        work[idx].as_slice_mut().unwrap()[i] = base - eps;
        let fm = f(&work);
        work[idx].as_slice_mut().unwrap()[i] = base;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Checks analytic gradients of `build` (a scalar-valued graph program over
/// differentiable leaves created from `inputs`) against central finite
/// differences with step 1e-6. Panics if any relative error exceeds `tol`.
pub fn grad_check<B>(inputs: &[ArrayD<f64>], build: B, tol: f64)
where
    B: Fn(&mut Graph, &[DiffTensor]) -> Result<DiffTensor>,
{
    let eps = 1e-6;
    let eval = |vals: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<DiffTensor> = vals
            .iter()
            .map(|v| g.leaf(v.clone(), false).expect("leaf"))
            .collect();
        let loss = build(&mut g, &leaves).expect("forward");
        g.scalar(loss)
    };

    let mut g = Graph::new();
    let leaves: Vec<DiffTensor> = inputs
        .iter()
        .map(|v| g.leaf(v.clone(), true).expect("leaf"))
        .collect();
    let loss = build(&mut g, &leaves).expect("forward");
    let grads = g.backward(loss).expect("backward");

    for (idx, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("missing gradient");
        let numeric = finite_diff_grad(inputs, idx, eps, eval);
        let mut max_rel: f64 = 0.0;
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        assert!(
            max_rel < tol,
            "gradient check failed for input {idx}: max rel err {max_rel:.3e} >= {tol:.1e}"
        );
    }
}

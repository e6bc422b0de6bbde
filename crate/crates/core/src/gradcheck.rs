//! Finite-difference gradient checking.
//!
//! Central differences with step `1e-6 * (1 + |x|)` against tape adjoints,
//! in f64. Callers are responsible for keeping inputs away from non-smooth
//! points (ReLU kinks, pool argmax ties); seeds used in the test suites were
//! picked so no activation sits within the finite-difference step of a kink.

use crate::error::Result;
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub rel_tol: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}, {} coords)",
            if self.pass { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.rel_tol,
            self.coords_checked
        )
    }
}

/// Check tape gradients of a scalar-valued graph builder against central
/// finite differences.
///
/// `inputs` pairs each leaf tensor with its trainable flag; frozen leaves are
/// skipped (they carry no gradient by contract). `max_coords_per_input`
/// limits the number of coordinates perturbed per tensor (sampled with a
/// seeded RNG) so large graphs stay affordable.
pub fn grad_check<F>(
    build: F,
    inputs: &[(Tensor<f64>, bool)],
    rel_tol: f64,
    max_coords_per_input: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(f64, Option<Vec<Option<Tensor<f64>>>>)> {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = tensors
            .iter()
            .zip(inputs.iter())
            .map(|(t, (_, trainable))| tape.leaf(t.clone(), *trainable))
            .collect();
        let root = build(&mut tape, &vars)?;
        Ok((tape.value(root).item()?, {
            let grads = tape.backward(root)?;
            Some(vars.iter().map(|&v| grads.get(v).cloned()).collect())
        }))
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|(t, _)| t.clone()).collect();
    let (_, grads) = eval(&base)?;
    let grads = grads.expect("gradients requested");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0usize;

    for (idx, (tensor, trainable)) in inputs.iter().enumerate() {
        if !*trainable {
            continue;
        }
        let analytic = grads[idx]
            .as_ref()
            .expect("trainable input must have a gradient");
        let mut coords: Vec<usize> = (0..tensor.numel()).collect();
        if let Some(m) = max_coords_per_input {
            coords.shuffle(&mut rng);
            coords.truncate(m);
        }
        for c in coords {
            let x = tensor.data()[c];
            let h = 1e-6 * (1.0 + x.abs());
            let mut plus = base.clone();
            plus[idx].data_mut()[c] = x + h;
            let mut minus = base.clone();
            minus[idx].data_mut()[c] = x - h;
            let fp = eval_value(&build, &plus, inputs)?;
            let fm = eval_value(&build, &minus, inputs)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err,
        rel_tol,
        coords_checked: checked,
        pass: max_rel_err <= rel_tol,
    })
}

fn eval_value<F>(
    build: &F,
    tensors: &[Tensor<f64>],
    inputs: &[(Tensor<f64>, bool)],
) -> Result<f64>
where
    F: Fn(&mut GradTape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = GradTape::new();
    let vars: Vec<Var> = tensors
        .iter()
        .zip(inputs.iter())
        .map(|(t, (_, trainable))| tape.leaf(t.clone(), *trainable))
        .collect();
    let root = build(&mut tape, &vars)?;
    tape.value(root).item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::Padding;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn conv2d_is_linear_so_fd_is_exact() {
        let x = randn(&[1, 5, 5], 10);
        let k = randn(&[2, 1, 3, 3], 11);
        let report = grad_check(
            |tape, vars| {
                let y = tape.conv2d(vars[0], vars[1], None, 1, Padding::Same)?;
                let flat_len = tape.value(y).numel();
                let flat = tape.reshape(y, vec![1, flat_len])?;
                let ones = tape.constant(Tensor::full(&[flat_len, 1], 1.0));
                let s = tape.matmul(flat, ones)?;
                tape.reshape(s, vec![])
            },
            &[(x, true), (k, true)],
            1e-8,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn sigmoid_chain_passes_at_1e6() {
        let x = randn(&[8], 42).map(|v| v * 2.0);
        let report = grad_check(
            |tape, vars| {
                let s1 = tape.sigmoid(vars[0])?;
                let s2 = tape.sigmoid(s1)?;
                let target = tape.constant(Tensor::zeros(&[8]));
                tape.mse(s2, target)
            },
            &[(x, true)],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn softmax_matmul_composite() {
        let v = randn(&[6, 3], 7);
        let report = grad_check(
            |tape, vars| {
                let vt = tape.transpose2(vars[0])?;
                let s = tape.matmul(vars[0], vt)?;
                let beta = tape.row_softmax(s)?;
                let target = tape.constant(Tensor::full(&[6, 6], 1.0 / 6.0));
                tape.mse(beta, target)
            },
            &[(v, true)],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn ortho_project_adjoint_matches_fd() {
        let v = randn(&[10, 3], 3);
        let target = randn(&[10, 10], 4);
        let report = grad_check(
            |tape, vars| {
                let p = tape.ortho_project(vars[0], 1e-6)?;
                let t = tape.constant(target.clone());
                tape.mse(p, t)
            },
            &[(v, true)],
            1e-6,
            None,
            0,
        )
        .unwrap();
        assert!(report.pass, "{report}");
    }
}

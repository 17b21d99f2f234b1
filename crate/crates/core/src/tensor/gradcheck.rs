//! Central-difference gradient verification.
//!
//! The closure rebuilds the forward graph from scratch for every evaluation,
//! so anything data-dependent (masks, argmax winners) is recomputed under
//! perturbation exactly as it would be in training. Runs in `f64`; checking
//! in `f32` drowns real bugs in rounding noise.

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub elems_checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Flat element index where the worst relative error lives.
    pub worst_elem: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Evenly spaced element indices, at most `cap`, always including the ends.
fn sample_indices(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        return (0..len).collect();
    }
    (0..cap)
        .map(|i| i * (len - 1) / (cap - 1))
        .collect()
}

/// Compare analytic gradients against central differences.
///
/// `build` must construct the graph on the given tape from leaves created in
/// the same order as `params` and return a scalar loss. `eps` is the
/// half-step; `max_elems_per_param` caps FD probes per tensor (evenly spaced;
/// small tensors are swept exhaustively).
pub fn grad_check<F>(
    params: &[(String, Tensor<f64>)],
    build: F,
    eps: f64,
    max_elems_per_param: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor<f64>]| -> Result<(Tape<f64>, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars)?;
        if tape.value(root).numel() != 1 {
            return Err(Error::Invariant(format!(
                "grad_check loss must be scalar, got {:?}",
                tape.value(root).shape()
            )));
        }
        Ok((tape, root, vars))
    };

    let base: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let (mut tape, root, vars) = run(&base)?;
    let loss = tape.value(root).data()[0];
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss under gradient check: {loss}")));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    for ((name, _), grad) in params.iter().zip(&analytic) {
        if let Some(bad) = grad.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "analytic gradient of `{name}` at element {bad}"
            )));
        }
    }
    drop(tape);

    let mut checks = Vec::with_capacity(params.len());
    let mut values = base.clone();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let idxs = sample_indices(tensor.numel(), max_elems_per_param);
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        let mut worst = 0usize;
        for &ei in &idxs {
            let orig = values[pi].data()[ei];
            values[pi].data_mut()[ei] = orig + eps;
            let (tp, rp, _) = run(&values)?;
            let fp = tp.value(rp).data()[0];
            values[pi].data_mut()[ei] = orig - eps;
            let (tm, rm, _) = run(&values)?;
            let fm = tm.value(rm).data()[0];
            values[pi].data_mut()[ei] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss while perturbing `{name}` element {ei}"
                )));
            }
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi][ei];
            let abs = (a - numeric).abs();
            let rel = abs / (a.abs() + numeric.abs()).max(1e-6);
            if rel > max_rel {
                max_rel = rel;
                worst = ei;
            }
            max_abs = max_abs.max(abs);
        }
        checks.push(ParamCheck {
            name: name.clone(),
            elems_checked: idxs.len(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            worst_elem: worst,
        });
    }
    Ok(GradCheckReport { params: checks, loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_on_correct_composite() {
        // loss = mean(relu(x·W + b) ⊙ sigmoid(x·W + b))
        let mut rng = crate::rng::stream(7, "gradcheck-test");
        let params = vec![
            ("x".to_string(), Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng)),
            ("w".to_string(), Tensor::<f64>::randn(&[4, 5], 0.5, &mut rng)),
            ("b".to_string(), Tensor::<f64>::randn(&[5], 0.1, &mut rng)),
        ];
        let report = grad_check(
            &params,
            |tape, vars| {
                let h = tape.matmul(vars[0], vars[1], false)?;
                let h = tape.add_row(h, vars[2])?;
                let r = tape.relu(h);
                let s = tape.sigmoid(h);
                let p = tape.mul(r, s)?;
                Ok(tape.mean(p))
            },
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-6,
            "unexpected gradient error {:?}",
            report.worst_param()
        );
    }

    #[test]
    fn catches_planted_wrong_gradient() {
        let params = vec![(
            "x".to_string(),
            Tensor::new(vec![1, 3], vec![0.7, -1.3, 2.1]).unwrap(),
        )];
        let report = grad_check(
            &params,
            |tape, vars| {
                let sq = tape.bad_square(vars[0]);
                Ok(tape.mean(sq))
            },
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(
            report.max_rel_err() > 0.3,
            "sabotaged backward slipped through: {}",
            report.max_rel_err()
        );
    }

    #[test]
    fn softmax_and_layer_norm_chain() {
        let mut rng = crate::rng::stream(11, "gradcheck-ln");
        let params = vec![
            ("x".to_string(), Tensor::<f64>::randn(&[2, 6], 1.0, &mut rng)),
            ("gain".to_string(), Tensor::<f64>::randn(&[6], 0.2, &mut rng)),
            ("bias".to_string(), Tensor::<f64>::randn(&[6], 0.2, &mut rng)),
        ];
        let report = grad_check(
            &params,
            |tape, vars| {
                let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                let p = tape.log_softmax(y, 1)?;
                let picked = tape.pick(p, vec![2, 4])?;
                let s = tape.sum(picked);
                Ok(tape.scale(s, -0.5))
            },
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-6,
            "unexpected gradient error {:?}",
            report.worst_param()
        );
    }

    #[test]
    fn matmul_trans_and_batch_paths() {
        let mut rng = crate::rng::stream(13, "gradcheck-mm");
        let params = vec![
            ("a".to_string(), Tensor::<f64>::randn(&[2, 3, 4], 1.0, &mut rng)),
            ("w".to_string(), Tensor::<f64>::randn(&[5, 4], 1.0, &mut rng)),
        ];
        let report = grad_check(
            &params,
            |tape, vars| {
                // shared rank-2 rhs used transposed under a batched lhs
                let y = tape.matmul(vars[0], vars[1], true)?;
                let t = tape.tanh(y);
                Ok(tape.mean(t))
            },
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(
            report.max_rel_err() < 1e-6,
            "unexpected gradient error {:?}",
            report.worst_param()
        );
    }
}

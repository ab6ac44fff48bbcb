//! Central finite-difference gradient checks.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{invalid, Result};

fn rel_err(analytic: f64, central: f64) -> f64 {
    (analytic - central).abs() / (analytic.abs() + central.abs() + 1e-8)
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    match tape.value(v) {
        [x] => Ok(*x),
        other => invalid(format!("objective must be scalar, got {} values", other.len())),
    }
}

/// Perturbs one `f32` coordinate by `±eps` and returns the two stored values.
/// The difference quotient divides by the step actually taken, which
/// differs from `2 eps` by the `f32` rounding of the perturbed values.
fn perturb(x: f32, eps: f64) -> (f32, f32) {
    ((x as f64 + eps) as f32, (x as f64 - eps) as f32)
}

/// Max over coordinates of `|analytic - central| / (|analytic| + |central| + 1e-8)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.input(point);
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(x)?.to_vec();

    let eval = |data: Vec<f32>| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.input(&Tensor::new(point.shape().to_vec(), data)?);
        let l = f(&mut t, xv)?;
        scalar_value(&t, l)
    };

    let mut worst = 0f64;
    for i in 0..point.len() {
        let (hi, lo) = perturb(point.data()[i], eps);
        let mut plus = point.data().to_vec();
        plus[i] = hi;
        let mut minus = point.data().to_vec();
        minus[i] = lo;
        let central = (eval(plus)? - eval(minus)?) / (hi as f64 - lo as f64);
        worst = worst.max(rel_err(analytic[i], central));
    }
    Ok(worst)
}

/// Same check over every coordinate of the listed parameters of a store.
pub fn finite_diff_check_params<F>(store: &ParamStore, ids: &[ParamId], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = ids.iter().map(|id| vec![0.0; store.get(*id).len()]).collect();
    for (pid, g) in grads.param_grads() {
        if let Some(slot) = ids.iter().position(|&i| i == pid) {
            analytic[slot].copy_from_slice(g);
        }
    }

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        scalar_value(&t, l)
    };

    let mut work = store.clone();
    let mut worst = 0f64;
    for (slot, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            let (hi, lo) = perturb(orig, eps);
            work.get_mut(id).data_mut()[i] = hi;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[i] = lo;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let central = (fp - fm) / (hi as f64 - lo as f64);
            worst = worst.max(rel_err(analytic[slot][i], central));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::scalar(3.0));
        let y = tape.mul(x, x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let p = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.7, -0.1]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let s = t.mul(x, x);
                Ok(t.sum_all(s))
            },
            &p,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}

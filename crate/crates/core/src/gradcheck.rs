//! Central finite-difference oracle for checking backward rules.

use crate::autograd::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Largest relative disagreement between autograd and central differences,
/// `max_i |fd_i - ad_i| / max(|fd_i|, |ad_i|, 1e-8)`, over every coordinate
/// of `x`.
///
/// `f` builds a scalar function of `x` on the supplied tape. It must be
/// deterministic; a function whose value changes between two calls on the
/// same input is rejected with [`TensorError::Oracle`].
pub fn finite_difference_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_difference_check_at(f, x, eps, &coords)
}

/// As [`finite_difference_check`], restricted to the listed flat coordinates.
pub fn finite_difference_check_at<F>(
    mut f: F,
    x: &Tensor<f64>,
    eps: f64,
    coords: &[usize],
) -> Result<f64, TensorError>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::Oracle(format!("eps {eps} outside (0, 1e-2]")));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.len()) {
        return Err(TensorError::Oracle(format!(
            "coordinate {bad} out of range for {} elements",
            x.len()
        )));
    }

    let mut tape = Tape::new();
    let xv = tape.param(x.clone().with_requires_grad(true));
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).expect("param has grad").to_vec();
    let base = tape.value(loss).data()[0];

    let mut eval = |point: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.constant(point.clone());
        let out = f(&mut tape, xv)?;
        if tape.value(out).len() != 1 {
            return Err(TensorError::Shape("oracle function must be scalar".into()));
        }
        Ok(tape.value(out).data()[0])
    };

    let again = eval(x)?;
    if again.to_bits() != base.to_bits() {
        return Err(TensorError::Oracle(format!(
            "function is not deterministic: {base} then {again}"
        )));
    }

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (plus - minus) / (2.0 * eps);
        let ad = analytic[i];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::from_f64(&[4], &[0.3, -1.2, 5.0, 2.5]).unwrap();
        let err = finite_difference_check(|t, x| t.sum(x), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn relu_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let vals: Vec<f64> = (0..16)
            .map(|_| {
                let v: f64 = rng.gen_range(0.01..2.0);
                if rng.gen_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = Tensor::from_f64(&[16], &vals).unwrap();
        let err = finite_difference_check(
            |t, x| {
                let r = t.relu(x)?;
                t.sum(r)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_cross_entropy_five_logits() {
        let x = Tensor::from_f64(&[1, 5], &[0.2, -1.0, 2.3, 0.7, -0.4]).unwrap();
        let err = finite_difference_check(
            |t, x| Ok(t.softmax_cross_entropy(x, &[3])?.0),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn nondeterministic_function_rejected() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_difference_check(
            |t, x| {
                calls.set(calls.get() + 1);
                let s = t.scale(x, calls.get() as f64)?;
                t.sum(s)
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Oracle(_)));
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(finite_difference_check(|t, x| t.sum(x), &x, 0.0).is_err());
        assert!(finite_difference_check(|t, x| t.sum(x), &x, 0.1).is_err());
    }
}

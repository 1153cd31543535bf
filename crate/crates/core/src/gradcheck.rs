//! Central-difference gradient checking against the tape's backward pass.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `f` at `x` with central differences.
///
/// `f` receives a fresh tape and the input variable and must return a scalar
/// variable. The result is `max_i |fd_i - ad_i| / max(1, |fd_i|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_on(Tape::new, f, x, h)
}

/// Like [`finite_diff_check`], but builds each tape with `make_tape` so a
/// deliberately faulty tape can be checked.
pub fn finite_diff_check_on<M, F>(make_tape: M, f: F, x: &Tensor, h: f64) -> Result<f64>
where
    M: Fn() -> Tape,
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Parameter(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let mut tape = make_tape();
    let input = tape.param(x.clone());
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let analytic = grads.get_or_zeros(input, x);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = make_tape();
        let v = t.param(probe);
        let o = f(&mut t, v)?;
        t.value(o).item()
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (fd - analytic.data()[i]).abs() / fd.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[7], &mut rng);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                let s = t.sum_all(sq)?;
                Ok(t.scale(s, 0.5))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_step_out_of_range() {
        let x = Tensor::vector(&[1.0]);
        assert!(finite_diff_check(|t, v| t.sum_all(v), &x, 1e-2).is_err());
    }
}

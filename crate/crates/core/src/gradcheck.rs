//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

/// Evaluates `f` at `x` on a fresh tape and returns the scalar value.
pub fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    Ok(eval_with_pattern(f, x)?.0)
}

fn eval_with_pattern<F>(f: &F, x: &Tensor) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("f returned {:?}", v.shape())));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok((v, tape.activation_pattern()))
}

/// Reverse-mode gradient of scalar `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<(f64, Tensor)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?;
    Ok((value, grads.wrt(xv)))
}

/// Fourth-order central differences
/// `(-f(x + 2h) + 8 f(x + h) - 8 f(x - h) + f(x - 2h)) / 12h` along each `e_i`.
///
/// Piecewise-smooth objectives are differenced on the piece containing `x`:
/// every leaky relu keeps the branch it takes at `x`, which is the
/// derivative reverse mode computes.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (_, pattern) = eval_with_pattern(f, x)?;
    let at = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::frozen(pattern.clone());
        let xv = tape.leaf(probe.clone());
        let out = f(&mut tape, xv)?;
        let v = tape.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let mut shifted = |d: f64| {
            probe.data_mut()[i] = orig + d;
            at(&probe)
        };
        let (p2, p1, m1, m2) = (shifted(2.0 * h)?, shifted(h)?, shifted(-h)?, shifted(-2.0 * h)?);
        probe.data_mut()[i] = orig;
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Compares reverse-mode and central-difference gradients of `f` at `x`.
///
/// The error of component `i` is `|a_i - c_i| / max(|a_i|, |c_i|, 1e-12)`;
/// the maximum over components is reported.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {}", h)));
    }
    let (_, analytic) = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, h)?;
    let mut worst = (0.0, 0);
    for (i, (a, c)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let denom = a.abs().max(c.abs()).max(1e-12);
        let err = (a - c).abs() / denom;
        if err > worst.0 {
            worst = (err, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = grad_check(|t, x| t.sum_squares(x), &x, 1e-6).unwrap();
        assert_eq!(r.analytic.data(), &[2.0, 4.0]);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_objective_is_rejected() {
        let x = Tensor::vector(vec![1e200]);
        let r = grad_check(
            |t, x| {
                let s = t.sum_squares(x)?;
                t.scale(s, 1e300)
            },
            &x,
            1e-6,
        );
        assert!(r.is_err());
    }

    #[test]
    fn kinks_are_differenced_on_the_current_piece() {
        // 1e-5 sits inside the stencil of h = 1e-3 but the slope at x is 1
        let x = Tensor::vector(vec![1e-5, -1e-5]);
        let r = grad_check(
            |t, x| {
                let y = t.leaky_relu(x, 0.2)?;
                t.sum(y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert_eq!(r.analytic.data(), &[1.0, 0.2]);
        assert!(r.max_rel_error < 1e-12, "{}", r.max_rel_error);
    }
}

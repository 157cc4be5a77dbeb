use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// Compares the tape gradient of scalar `f` at `x` against central finite
/// differences and returns
/// `max_i |analytic_i − fd_i| / max(|analytic_i|, |fd_i|, 1e−8)`.
pub fn grad_check<S, F>(f: F, x: &Tensor<S>, h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, Var) -> Result<Var>,
{
    if !(h > S::zero() && h <= S::lit(1e-3)) {
        return Err(Error::Contract(format!(
            "finite-difference step {h} outside (0, 1e-3]"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.param(x)?;
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract(
            "grad_check needs a scalar-valued function".into(),
        ));
    }
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[S]>::to_vec)
        .unwrap_or_else(|| vec![S::zero(); x.numel()]);

    let eval = |probe: &Tensor<S>| -> Result<S> {
        let mut t = Tape::new();
        let v = t.constant(probe)?;
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };

    let floor = S::lit(1e-8);
    let two_h = h + h;
    let mut worst = S::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / two_h;
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Runs [`grad_check`] with respect to several inputs at once by packing them
/// into one flat vector.
pub fn grad_check_many<S, F>(f: F, inputs: &[Tensor<S>], h: S) -> Result<S>
where
    S: Scalar,
    F: Fn(&mut Tape<S>, &[Var]) -> Result<Var>,
{
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let flat: Vec<S> = inputs
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let packed = Tensor::new(&[flat.len()], flat)?;
    grad_check(
        |tape, v| {
            let mut parts = Vec::with_capacity(inputs.len());
            let mut offset = 0;
            for (t, &n) in inputs.iter().zip(&sizes) {
                let idx = (offset..offset + n).collect();
                parts.push(tape.gather(v, idx, t.shape())?);
                offset += n;
            }
            f(tape, &parts)
        },
        &packed,
        h,
    )
}

use rand::Rng;

use crate::autodiff::{nn, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::Binder;

/// Two-layer GELU MLP. With `residual` set the output is `x + MLP(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpAdapter {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub residual: bool,
}

impl MlpAdapter {
    /// Gaussian first layer. The second layer is zero when `zero_out` is
    /// set, otherwise Gaussian with fan-in scaling.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        residual: bool,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::Config(
                "MLP adapter dimensions must be positive".into(),
            ));
        }
        if residual && in_dim != out_dim {
            return Err(Error::Config(format!(
                "residual MLP adapter needs in_dim == out_dim, got {in_dim} and {out_dim}"
            )));
        }
        let w2 = if zero_out {
            Tensor::zeros(&[hidden, out_dim])
        } else {
            Tensor::randn(&[hidden, out_dim], 1.0 / (hidden as f64).sqrt(), rng)
        };
        Ok(Self {
            w1: Tensor::randn(&[in_dim, hidden], 1.0 / (in_dim as f64).sqrt(), rng),
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[out_dim]),
            residual,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w2.shape()[1]
    }

    pub(crate) fn arrays(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub(crate) fn arrays_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }

    /// Row-wise forward over `[rows × in]`.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Result<Var> {
        self.forward_prefixed(tape, binder, &format!("{name}/"), x)
    }

    /// Forward with arrays bound as `<prefix><array>`.
    pub(crate) fn forward_prefixed(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        x: Var,
    ) -> Result<Var> {
        let w1 = binder.bind(tape, &format!("{prefix}w1"), &self.w1)?;
        let b1 = binder.bind(tape, &format!("{prefix}b1"), &self.b1)?;
        let w2 = binder.bind(tape, &format!("{prefix}w2"), &self.w2)?;
        let b2 = binder.bind(tape, &format!("{prefix}b2"), &self.b2)?;
        let h = nn::linear(tape, x, w1, b1)?;
        let h = tape.gelu(h)?;
        let y = nn::linear(tape, h, w2, b2)?;
        if self.residual {
            tape.add(x, y)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn zero_out_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = MlpAdapter::new(6, 5, 6, true, true, &mut rng).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let y = m
            .forward(&mut tape, &mut Binder::trainable(), "m", xv)
            .unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = MlpAdapter::new(3, 4, 2, false, false, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let y = m
            .forward(&mut tape, &mut Binder::frozen(), "m", xv)
            .unwrap();
        let gelu = |v: f64| {
            0.5 * v
                * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
        };
        for r in 0..2 {
            let h: Vec<f64> = (0..4)
                .map(|j| {
                    gelu(
                        (0..3)
                            .map(|i| x.data()[r * 3 + i] * m.w1.data()[i * 4 + j])
                            .sum::<f64>()
                            + m.b1.data()[j],
                    )
                })
                .collect();
            for o in 0..2 {
                let want =
                    (0..4).map(|j| h[j] * m.w2.data()[j * 2 + o]).sum::<f64>() + m.b2.data()[o];
                assert!((tape.value(y).data()[r * 2 + o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn residual_needs_square_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(MlpAdapter::new(4, 3, 5, true, true, &mut rng).is_err());
        assert!(MlpAdapter::new(4, 0, 4, false, true, &mut rng).is_err());
    }
}

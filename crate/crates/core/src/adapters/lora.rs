//! Low-rank within-model adaptation: `W' = W + (α/r)·Φ₁Φ₂`, applied as a
//! separate low-rank path so the frozen `W` is never rewritten.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::foundation::FrozenFoundation;

/// Standard deviation of the Gaussian `Φ₁` initialisation.
pub const LORA_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    /// Name of the frozen matrix this module augments, e.g. `vision/block0/attn_q`.
    pub target: String,
    pub rank: usize,
    pub alpha: f64,
    /// `Φ₁`, `[d × r]`.
    pub down: Tensor,
    /// `Φ₂`, `[r × h]`, zero at construction.
    pub up: Tensor,
}

impl LoraModule {
    pub fn new<R: Rng + ?Sized>(
        target: &str,
        d: usize,
        h: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Self> {
        check_rank(d, h, rank)?;
        Ok(Self {
            target: target.to_string(),
            rank,
            alpha,
            down: Tensor::randn(&[d, rank], LORA_INIT_STD, rng),
            up: Tensor::zeros(&[rank, h]),
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.down.numel() + self.up.numel()
    }
}

/// `r ≤ min(d, h) / 2`, the working definition of `r ≪ min(d, h)`.
pub fn check_rank(d: usize, h: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d.min(h) / 2 {
        return Err(Error::Config(format!(
            "LoRA rank {rank} must be in 1..={} for a {d}×{h} matrix",
            d.min(h) / 2
        )));
    }
    Ok(())
}

/// `scale · (x·Φ₁)·Φ₂`
pub fn lora_delta(tape: &mut Tape, x: Var, down: Var, up: Var, scale: f64) -> Result<Var> {
    let low = tape.matmul(x, down)?;
    let delta = tape.matmul(low, up)?;
    tape.scale(delta, scale)
}

/// `x·W + (α/r)·(x·Φ₁)·Φ₂` for a frozen `W`. Gradients reach `Φ₁` and `Φ₂`
/// only when they are bound as trainable.
pub fn lora_forward(
    tape: &mut Tape,
    x: Var,
    w: Var,
    down: Var,
    up: Var,
    lora: &LoraModule,
) -> Result<Var> {
    let (d, h) = match tape.shape(w) {
        [d, h] => (*d, *h),
        s => return Err(Error::shape("lora_forward", s, lora.down.shape())),
    };
    check_rank(d, h, lora.rank)?;
    if lora.down.shape() != [d, lora.rank] || lora.up.shape() != [lora.rank, h] {
        return Err(Error::shape("lora_forward", &[d, h], lora.down.shape()));
    }
    let base = tape.matmul(x, w)?;
    let delta = lora_delta(tape, x, down, up, lora.scale())?;
    tape.add(base, delta)
}

/// Query and value projections of every block in one encoder tower.
pub fn qv_targets(model: &FrozenFoundation, tower: &str) -> Vec<String> {
    let layers = match tower {
        "vision" => model.config().vision.layers,
        "text" => model.config().text.layers,
        _ => 0,
    };
    (0..layers)
        .flat_map(|i| {
            [
                format!("{tower}/block{i}/attn_q"),
                format!("{tower}/block{i}/attn_v"),
            ]
        })
        .collect()
}

/// One fresh module per target; fails on names that are not adaptable.
pub fn make_lora_modules<R: Rng + ?Sized>(
    model: &FrozenFoundation,
    targets: &[String],
    rank: usize,
    alpha: f64,
    rng: &mut R,
) -> Result<Vec<LoraModule>> {
    let valid = model.adaptable_weights();
    targets
        .iter()
        .map(|t| {
            if !valid.contains(t) {
                return Err(Error::UnknownWeight {
                    name: t.clone(),
                    valid: valid.clone(),
                });
            }
            let w = model.params().get(&format!("{t}/w"))?;
            LoraModule::new(t, w.shape()[0], w.shape()[1], rank, alpha, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn run(x: &Tensor, w: &Tensor, lora: &LoraModule) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x).unwrap();
        let wv = tape.constant(w).unwrap();
        let a = tape.param(&lora.down).unwrap();
        let b = tape.param(&lora.up).unwrap();
        let y = lora_forward(&mut tape, xv, wv, a, b, lora).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn fresh_module_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[8, 6], 1.0, &mut rng);
        let lora = LoraModule::new("w", 8, 6, 2, 4.0, &mut rng).unwrap();
        assert_eq!(run(&x, &w, &lora), x.matmul(&w).unwrap());
    }

    #[test]
    fn rank_one_hand_example() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let lora = LoraModule {
            target: "w".into(),
            rank: 1,
            alpha: 1.0,
            down: Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap(),
            up: Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap(),
        };
        // rank 1 on a 2×2 matrix sits exactly at the r ≤ min(d,h)/2 limit
        assert_eq!(run(&eye, &eye, &lora).data(), &[1.0, 2.0, 0.0, 1.0]);
    }

    #[test]
    fn rank_limit_is_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(LoraModule::new("w", 8, 6, 4, 1.0, &mut rng).is_err());
        assert!(LoraModule::new("w", 8, 6, 3, 1.0, &mut rng).is_ok());
        assert!(LoraModule::new("w", 8, 6, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn gradients_reach_only_the_low_rank_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let mut lora = LoraModule::new("w", 8, 8, 2, 2.0, &mut rng).unwrap();
        lora.up = Tensor::randn(&[2, 8], 0.1, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let wv = tape.constant(&w).unwrap();
        let a = tape.param(&lora.down).unwrap();
        let b = tape.param(&lora.up).unwrap();
        let y = lora_forward(&mut tape, xv, wv, a, b, &lora).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(wv).is_none());
        assert!(tape.grad(a).is_some() && tape.grad(b).is_some());
    }
}

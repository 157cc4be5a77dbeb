use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Smoothing added to numerator and denominator of the soft Dice.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiceCeWeights {
    pub dice: f64,
    pub ce: f64,
}

impl Default for DiceCeWeights {
    fn default() -> Self {
        Self { dice: 1.0, ce: 1.0 }
    }
}

/// `w_dice·(1 − softDice(σ(logits), mask)) + w_ce·BCE(logits, mask)`, with
/// `softDice = (2Σpm + 1) / (Σp + Σm + 1)`.
pub fn dice_ce_loss(tape: &mut Tape, logits: Var, mask: &Tensor, w: DiceCeWeights) -> Result<Var> {
    if tape.shape(logits) != mask.shape() {
        return Err(Error::shape(
            "dice_ce_loss",
            tape.shape(logits),
            mask.shape(),
        ));
    }
    let p = tape.sigmoid(logits)?;
    let m = tape.constant(mask)?;
    let pm = tape.mul(p, m)?;
    let inter = tape.sum(pm)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_SMOOTH)?;
    let sp = tape.sum(p)?;
    let den = tape.add_scalar(sp, mask.data().iter().sum::<f64>() + DICE_SMOOTH)?;
    let dice = tape.div(num, den)?;
    let one_minus = tape.neg(dice)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let dice_term = tape.scale(one_minus, w.dice)?;
    let bce = tape.bce_with_logits(logits, mask.data())?;
    let ce_term = tape.scale(bce, w.ce)?;
    tape.add(dice_term, ce_term)
}

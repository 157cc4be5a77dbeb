//! Finite-difference self-verification: every differentiable op family and
//! the composed adapter paths, each over many random seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    decode_segmentation, fusion_forward, AdapterComposition, AdapterModule, DecoderAdapter,
    FusionAdapter, MlpAdapter, Modality, ProjectionInit, RoutingKey,
};
use crate::autodiff::{grad_check_many, nn, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::foundation::{
    FoundationConfig, FrozenFoundation, TextEncoderConfig, VisionEncoderConfig,
};
use crate::heads::{
    deephit_loss, dice_ce_loss, mtlr_loss, DeepHitParams, DiceCeWeights, DiscretizationGrid,
    SurvivalRecord,
};
use crate::params::{Binder, Parameters};
use crate::tasks::{
    build_prognosis, build_seg_ct, prognosis_forward, segmentation_forward, PrognosisPlan,
    SegmentationPlan,
};

/// Relative-error bound every family must stay under.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Worst relative error of one family over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyCheck {
    pub family: String,
    /// Composed adapter path rather than a single op.
    pub composed: bool,
    pub seeds: usize,
    pub max_rel_error: f64,
}

impl FamilyCheck {
    pub fn pass(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

/// A weighted scalar readout so every output coordinate carries a distinct
/// upstream gradient.
pub fn readout(tape: &mut Tape, y: Var) -> Result<Var> {
    let w = Tensor::from_fn(tape.shape(y), |i| 0.5 + ((i * 7 + 3) % 11) as f64 / 10.0);
    let wv = tape.constant(&w)?;
    let p = tape.mul(y, wv)?;
    tape.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Op families with the input shapes they are checked at.
pub fn op_families() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "div",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|t, v| {
                let e = t.exp(v[1])?;
                t.div(v[0], e)
            }),
        ),
        (
            "add_bias",
            vec![vec![3, 4], vec![4]],
            Box::new(|t, v| t.add_bias(v[0], v[1])),
        ),
        ("scale", vec![vec![5]], Box::new(|t, v| t.scale(v[0], -1.7))),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "bmm",
            vec![vec![2, 3, 4], vec![2, 4, 2]],
            Box::new(|t, v| t.bmm(v[0], v[1])),
        ),
        (
            "transpose",
            vec![vec![2, 3, 4]],
            Box::new(|t, v| t.transpose(v[0])),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|t, v| t.reshape(v[0], &[3, 4])),
        ),
        (
            "gather",
            vec![vec![6]],
            Box::new(|t, v| t.gather(v[0], vec![5, 0, 0, 3], &[2, 2])),
        ),
        (
            "embedding",
            vec![vec![5, 3]],
            Box::new(|t, v| t.embedding(v[0], &[4, 1, 4])),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 2]],
            Box::new(|t, v| t.concat(&[v[0], v[1]])),
        ),
        ("gelu", vec![vec![7]], Box::new(|t, v| t.gelu(v[0]))),
        ("sigmoid", vec![vec![7]], Box::new(|t, v| t.sigmoid(v[0]))),
        ("exp", vec![vec![7]], Box::new(|t, v| t.exp(v[0]))),
        (
            "log",
            vec![vec![7]],
            Box::new(|t, v| {
                let e = t.exp(v[0])?;
                let p = t.add_scalar(e, 0.5)?;
                t.log(p)
            }),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            Box::new(|t, v| t.softmax(v[0])),
        ),
        (
            "log_softmax",
            vec![vec![3, 5]],
            Box::new(|t, v| t.log_softmax(v[0])),
        ),
        (
            "logsumexp",
            vec![vec![3, 5]],
            Box::new(|t, v| t.logsumexp(v[0])),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("sum", vec![vec![2, 3]], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![vec![2, 3]], Box::new(|t, v| t.mean(v[0]))),
        (
            "mean_rows",
            vec![vec![4, 3]],
            Box::new(|t, v| t.mean_rows(v[0])),
        ),
        (
            "sum_last",
            vec![vec![4, 3]],
            Box::new(|t, v| t.sum_last(v[0])),
        ),
        ("cumsum", vec![vec![2, 5]], Box::new(|t, v| t.cumsum(v[0]))),
        (
            "l2_normalize",
            vec![vec![3, 4]],
            Box::new(|t, v| t.l2_normalize(v[0])),
        ),
        (
            "bce_with_logits",
            vec![vec![8]],
            Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0])),
        ),
        (
            "cross_entropy",
            vec![vec![4, 5]],
            Box::new(|t, v| nn::cross_entropy(t, v[0], &[0, 3, 1, 4])),
        ),
        (
            "attention",
            vec![vec![5, 8], vec![5, 8], vec![5, 8]],
            Box::new(|t, v| nn::attention(t, v[0], v[1], v[2], 2)),
        ),
    ]
}

/// Worst relative error of one op family over `seeds` random inputs.
pub fn check_op(shapes: &[Vec<usize>], f: &OpFn, seeds: usize, salt: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(salt));
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| Tensor::randn(s, 1.0, &mut rng))
            .collect();
        let err = grad_check_many(
            |tape, vars| {
                let y = f(tape, vars)?;
                readout(tape, y)
            },
            &inputs,
            GRADCHECK_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Compares the binder gradients of every array of `params` with central
/// differences of `loss`. A bound name that `params` does not own, or an
/// owned array the loss never binds, is an error.
pub fn grad_check_params<P, F>(params: &P, loss: F, h: f64) -> Result<f64>
where
    P: Parameters + Clone,
    F: Fn(&mut Tape, &mut Binder, &P) -> Result<Var>,
{
    let mut tape = Tape::new();
    let mut binder = Binder::trainable();
    let l = loss(&mut tape, &mut binder, params)?;
    tape.backward(l)?;
    let names = params.names();
    let bound: Vec<&String> = binder.vars().map(|(n, _)| n).collect();
    if let Some(n) = bound.iter().find(|n| !names.contains(n)) {
        return Err(Error::Ownership(format!(
            "loss binds {n:?}, which the parameters do not own"
        )));
    }
    if let Some(n) = names.iter().find(|n| !bound.contains(n)) {
        return Err(Error::Contract(format!(
            "array {n:?} is never bound by the loss"
        )));
    }
    let grads = binder.grads(&tape);

    let eval = |p: &P| -> Result<f64> {
        let mut t = Tape::new();
        let y = loss(&mut t, &mut Binder::frozen(), p)?;
        Ok(t.value(y).item())
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for name in &names {
        let values = params.snapshot().remove(name).expect("listed name");
        for i in 0..values.numel() {
            let orig = values.data()[i];
            let set = |p: &mut P, v: f64| {
                p.visit_mut(&mut |n, t| {
                    if n == name {
                        t.data_mut()[i] = v;
                    }
                })
            };
            set(&mut probe, orig + h);
            let up = eval(&probe)?;
            set(&mut probe, orig - h);
            let down = eval(&probe)?;
            set(&mut probe, orig);
            let fd = (up - down) / (2.0 * h);
            let a = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Replaces every array with Gaussian noise so that zero-initialised
/// factors carry gradient in both directions.
fn randomize<R: Rng + ?Sized>(p: &mut impl Parameters, std: f64, rng: &mut R) {
    p.visit_mut(&mut |_, t| *t = Tensor::randn(t.shape(), std, rng));
}

/// A foundation model small enough for coordinate-wise differencing.
pub fn tiny_foundation(seed: u64) -> Result<FrozenFoundation> {
    let cfg = FoundationConfig {
        vision: VisionEncoderConfig {
            volume_shape: [8, 8, 8],
            patch_size: 4,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            mlp_dim: 16,
            proj_dim: 8,
        },
        text: TextEncoderConfig {
            vocab_size: 32,
            max_tokens: 6,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            mlp_dim: 16,
            proj_dim: 8,
        },
        temperature: 0.07,
    };
    let mut model = FrozenFoundation::init(cfg, seed)?;
    model.freeze();
    Ok(model)
}

fn random_records<R: Rng + ?Sized>(
    n: usize,
    bins: usize,
    rng: &mut R,
) -> Result<Vec<SurvivalRecord>> {
    let mut edges: Vec<f64> = (0..bins).map(|i| i as f64).collect();
    edges.push(f64::INFINITY);
    let grid = DiscretizationGrid::new(edges)?;
    (0..n)
        .map(|_| {
            SurvivalRecord::new(
                rng.random_range(0.1..bins as f64),
                rng.random_bool(0.6),
                &grid,
            )
        })
        .collect()
}

fn head_composition<R: Rng + ?Sized>(
    input: usize,
    out: usize,
    rng: &mut R,
) -> Result<AdapterComposition> {
    let mut c = AdapterComposition::new(RoutingKey::prognosis());
    c.push(
        "head",
        AdapterModule::Mlp(MlpAdapter::new(input, 6, out, false, false, rng)?),
    )?;
    randomize(&mut c, 0.5, rng);
    Ok(c)
}

type ComposedCheck = fn(u64) -> Result<f64>;

fn lora_attention(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = tiny_foundation(seed)?;
    let mut c = AdapterComposition::new(RoutingKey::prognosis());
    let targets = crate::adapters::qv_targets(&model, "text");
    c.attach_lora(&model, "text", &targets, 2, 4.0, &mut rng)?;
    randomize(&mut c, 0.3, &mut rng);
    let ids: Vec<usize> = (0..5).map(|_| rng.random_range(2..32)).collect();
    grad_check_params(
        &c,
        |tape, binder, c| {
            let hooks = c.encoder_hooks(tape, binder, "text")?;
            let enc = model.encode_text_on(tape, &mut Binder::frozen(), &ids, &hooks)?;
            readout(tape, enc.tokens)
        },
        GRADCHECK_STEP,
    )
}

fn fusion_head(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = AdapterComposition::new(RoutingKey::prognosis());
    let fusion = FusionAdapter::new(
        &[
            (Modality::Ct, 4, ProjectionInit::Zero),
            (Modality::Text, 4, ProjectionInit::Identity),
        ],
        4,
        5,
        &mut rng,
    )?;
    c.push("fusion", AdapterModule::Fusion(fusion))?;
    c.push(
        "head",
        AdapterModule::Mlp(MlpAdapter::new(4, 5, 3, false, false, &mut rng)?),
    )?;
    randomize(&mut c, 0.5, &mut rng);
    let (a, b) = (
        Tensor::randn(&[3, 4], 1.0, &mut rng),
        Tensor::randn(&[3, 4], 1.0, &mut rng),
    );
    grad_check_params(
        &c,
        |tape, binder, c| {
            let inputs = [Some(tape.constant(&a)?), Some(tape.constant(&b)?)];
            let z = fusion_forward(tape, binder, "fusion", c.fusion("fusion")?, &inputs)?;
            let y = c.mlp("head")?.forward(tape, binder, "head", z)?;
            readout(tape, y)
        },
        GRADCHECK_STEP,
    )
}

fn decoder_dice_ce(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [4, 4, 8];
    let mut c = AdapterComposition::new(RoutingKey::seg_ct());
    c.push(
        "decoder",
        AdapterModule::Decoder(DecoderAdapter::new(5, 2, shape, 0.3, &mut rng)?),
    )?;
    randomize(&mut c, 0.3, &mut rng);
    let tokens = Tensor::randn(&[16, 5], 1.0, &mut rng);
    let mask = Tensor::from_fn(&shape, |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    grad_check_params(
        &c,
        |tape, binder, c| {
            let t = tape.constant(&tokens)?;
            let logits = decode_segmentation(tape, binder, "decoder", c.decoder("decoder")?, t)?;
            dice_ce_loss(tape, logits, &mask, DiceCeWeights::default())
        },
        GRADCHECK_STEP,
    )
}

fn survival_head(seed: u64, deephit: bool) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = 4;
    let out = if deephit { bins } else { bins - 1 };
    let c = head_composition(5, out, &mut rng)?;
    let x = Tensor::randn(&[5, 5], 1.0, &mut rng);
    let recs = random_records(5, bins, &mut rng)?;
    grad_check_params(
        &c,
        |tape, binder, c| {
            let xv = tape.constant(&x)?;
            let y = c.mlp("head")?.forward(tape, binder, "head", xv)?;
            Ok(if deephit {
                deephit_loss(tape, y, &recs, DeepHitParams::default())?.loss
            } else {
                mtlr_loss(tape, y, &recs)?.loss
            })
        },
        GRADCHECK_STEP,
    )
}

fn mtlr(seed: u64) -> Result<f64> {
    survival_head(seed, false)
}

fn deephit(seed: u64) -> Result<f64> {
    survival_head(seed, true)
}

fn segmentation_path(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = tiny_foundation(seed)?;
    let plan = SegmentationPlan {
        shape: [8, 8, 4],
        patch: 4,
        rank: 2,
        alpha: 4.0,
        decoder_init_std: 0.3,
    };
    let mut c = build_seg_ct(&model, &plan, &mut rng)?;
    randomize(&mut c, 0.3, &mut rng);
    let ct = Tensor::randn(&plan.shape, 1.0, &mut rng);
    let mask = Tensor::from_fn(
        &plan.shape,
        |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 },
    );
    grad_check_params(
        &c,
        |tape, binder, c| {
            let logits =
                segmentation_forward(tape, &mut Binder::frozen(), binder, &model, c, &ct, None)?;
            dice_ce_loss(tape, logits, &mask, DiceCeWeights::default())
        },
        GRADCHECK_STEP,
    )
}

fn prognosis_path(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = tiny_foundation(seed)?;
    let plan = PrognosisPlan {
        model: crate::heads::SurvivalModel::DeepHit,
        bins: 3,
        rank: 2,
        alpha: 4.0,
        hidden: 4,
    };
    let mut c = build_prognosis(&model, &plan, &mut rng)?;
    randomize(&mut c, 0.3, &mut rng);
    let images = Tensor::randn(&[3, 8], 0.5, &mut rng);
    let texts: Vec<Vec<usize>> = (0..3)
        .map(|_| (0..4).map(|_| rng.random_range(2..32)).collect())
        .collect();
    grad_check_params(
        &c,
        |tape, binder, c| {
            let y = prognosis_forward(
                tape,
                &mut Binder::frozen(),
                binder,
                &model,
                c,
                Some(&images),
                Some(&texts),
            )?;
            readout(tape, y)
        },
        GRADCHECK_STEP,
    )
}

/// Composed adapter paths, checked with respect to every adapter array.
pub fn composed_paths() -> Vec<(&'static str, ComposedCheck)> {
    vec![
        ("lora_attention", lora_attention),
        ("fusion_head", fusion_head),
        ("decoder_dice_ce", decoder_dice_ce),
        ("mtlr", mtlr),
        ("deephit", deephit),
        ("segmentation_path", segmentation_path),
        ("prognosis_path", prognosis_path),
    ]
}

/// Runs every op family and composed path over `seeds` seeds each.
pub fn gradcheck_suite(seeds: usize) -> Result<Vec<FamilyCheck>> {
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in op_families().into_iter().enumerate() {
        out.push(FamilyCheck {
            family: name.to_string(),
            composed: false,
            seeds,
            max_rel_error: check_op(&shapes, &f, seeds, 7 + i as u64)?,
        });
    }
    for (name, f) in composed_paths() {
        let mut worst = 0.0f64;
        for seed in 0..seeds as u64 {
            worst = worst.max(f(seed)?);
        }
        out.push(FamilyCheck {
            family: name.to_string(),
            composed: true,
            seeds,
            max_rel_error: worst,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unbound_arrays_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = head_composition(3, 2, &mut rng).unwrap();
        c.push(
            "extra",
            AdapterModule::Mlp(MlpAdapter::new(3, 2, 3, true, true, &mut rng).unwrap()),
        )
        .unwrap();
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let r = grad_check_params(
            &c,
            |tape, binder, c| {
                let xv = tape.constant(&x)?;
                let y = c.mlp("head")?.forward(tape, binder, "head", xv)?;
                tape.sum(y)
            },
            1e-5,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn misnamed_binding_is_an_ownership_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = head_composition(3, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let r = grad_check_params(
            &c,
            |tape, binder, c| {
                let xv = tape.constant(&x)?;
                let y = c.mlp("head")?.forward(tape, binder, "head2", xv)?;
                tape.sum(y)
            },
            1e-5,
        );
        assert!(matches!(r, Err(Error::Ownership(_))));
    }

    #[test]
    fn composed_paths_pass_on_a_few_seeds() {
        for (name, f) in composed_paths() {
            for seed in 0..3 {
                let e = f(seed).unwrap();
                assert!(e < GRADCHECK_TOLERANCE, "{name} seed {seed}: {e}");
            }
        }
    }
}

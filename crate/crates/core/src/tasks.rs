//! Task forwards for every route, composition builders, and the frozen
//! reference paths that freshly built compositions must reproduce.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    decode_segmentation, fusion_forward, AdapterComposition, AdapterModule, AdapterRegistry,
    DecoderAdapter, FusionAdapter, MlpAdapter, Modality, ProjectionInit, ResolutionReembed,
    RoutingKey, Task,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{
    preprocess_ct, preprocess_pet, resample_mask, resample_volume, PreprocessSpec, SyntheticCase,
};
use crate::data::{NEGATIVE_PROMPT, POSITIVE_PROMPT};
use crate::error::{Error, Result};
use crate::foundation::{
    classify_similarity, Classification, EncoderHooks, FrozenFoundation, Tokenizer,
};
use crate::heads::SurvivalModel;
use crate::params::Binder;

pub const FUSION: &str = "fusion";
pub const HEAD: &str = "head";
pub const DECODER: &str = "decoder";

/// Module-name prefix of one input path.
pub fn path(m: Modality) -> &'static str {
    m.as_str()
}

/// Model-ready inputs of one case.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseInput {
    /// Preprocessed CT at the model resolution.
    pub ct: Tensor,
    /// Preprocessed PET at the model resolution.
    pub pet: Tensor,
    /// Padded report token ids.
    pub text: Vec<usize>,
    /// Binary mask at the model resolution.
    pub mask: Tensor,
}

pub fn prepare_case(
    case: &SyntheticCase,
    spec: &PreprocessSpec,
    tokenizer: &Tokenizer,
) -> Result<CaseInput> {
    let t = spec.target_resolution;
    Ok(CaseInput {
        ct: preprocess_ct(&resample_volume(&case.ct, t)?, spec),
        pet: preprocess_pet(&resample_volume(&case.pet, t)?, spec),
        text: tokenizer.encode_padded(&case.report),
        mask: resample_mask(&case.mask, t)?,
    })
}

pub fn report_tokenizer(model: &FrozenFoundation) -> Result<Tokenizer> {
    let t = &model.config().text;
    Tokenizer::report(t.vocab_size, t.max_tokens)
}

/// Class prompts in label order: negative, positive.
pub fn class_prompt_ids(tokenizer: &Tokenizer) -> Vec<Vec<usize>> {
    [NEGATIVE_PROMPT, POSITIVE_PROMPT]
        .iter()
        .map(|p| tokenizer.encode_padded(p))
        .collect()
}

/// Frozen zero-shot classification against the class prompts.
pub fn classify(
    model: &FrozenFoundation,
    ct: &Tensor,
    prompts: &[Vec<usize>],
) -> Result<Classification> {
    let image = model.encode_image(ct)?.pooled;
    let prompts = prompts
        .iter()
        .map(|p| Ok(model.encode_text(p)?.pooled))
        .collect::<Result<Vec<_>>>()?;
    classify_similarity(&image, &prompts)
}

/// Stacks equally shaped vectors or single rows into `[rows × k]`.
pub fn stack_rows(tape: &mut Tape, rows: &[Var]) -> Result<Var> {
    let k = rows
        .first()
        .map(|&r| tape.value(r).numel())
        .ok_or_else(|| Error::Contract("cannot stack zero rows".into()))?;
    let flat = rows
        .iter()
        .map(|&r| tape.reshape(r, &[k]))
        .collect::<Result<Vec<_>>>()?;
    let all = tape.concat(&flat)?;
    tape.reshape(all, &[rows.len(), k])
}

/// Which inputs a prognosis forward sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PrognosisInputs {
    ImageText,
    TextOnly,
    ImageOnly,
}

impl PrognosisInputs {
    pub fn image(self) -> bool {
        self != Self::TextOnly
    }

    pub fn text(self) -> bool {
        self != Self::ImageOnly
    }
}

impl std::str::FromStr for PrognosisInputs {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image+text" => Ok(Self::ImageText),
            "text" => Ok(Self::TextOnly),
            "image" => Ok(Self::ImageOnly),
            _ => Err(Error::Config(format!(
                "unknown prognosis inputs {s:?}; expected image+text, text or image"
            ))),
        }
    }
}

/// Sizes of a prognosis composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrognosisPlan {
    pub model: SurvivalModel,
    pub bins: usize,
    pub rank: usize,
    pub alpha: f64,
    pub hidden: usize,
}

/// Text LoRA on Q/V, residual MLP adapters on both pooled features, a
/// fusion layer that starts as the text pass-through, and a survival head.
pub fn build_prognosis<R: Rng + ?Sized>(
    model: &FrozenFoundation,
    plan: &PrognosisPlan,
    rng: &mut R,
) -> Result<AdapterComposition> {
    let s = model.config().vision.proj_dim;
    let mut c = AdapterComposition::new(RoutingKey::prognosis());
    let targets = crate::adapters::qv_targets(model, "text");
    c.attach_lora(
        model,
        path(Modality::Text),
        &targets,
        plan.rank,
        plan.alpha,
        rng,
    )?;
    for m in [Modality::Ct, Modality::Text] {
        let mlp = MlpAdapter::new(s, plan.hidden, s, true, true, rng)?;
        c.push(format!("{}.mlp", path(m)), AdapterModule::Mlp(mlp))?;
    }
    let fusion = FusionAdapter::new(
        &[
            (Modality::Ct, s, ProjectionInit::Zero),
            (Modality::Text, s, ProjectionInit::Identity),
        ],
        s,
        plan.hidden,
        rng,
    )?;
    c.push(FUSION, AdapterModule::Fusion(fusion))?;
    let head = MlpAdapter::new(
        s,
        plan.hidden,
        plan.model.out_dim(plan.bins),
        false,
        false,
        rng,
    )?;
    c.push(HEAD, AdapterModule::Mlp(head))?;
    Ok(c)
}

/// Survival-head outputs `[B × out]`. `images` holds frozen pooled CT
/// features `[B × s]`; `texts` holds padded report ids.
pub fn prognosis_forward(
    tape: &mut Tape,
    base: &mut Binder,
    adapters: &mut Binder,
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    images: Option<&Tensor>,
    texts: Option<&[Vec<usize>]>,
) -> Result<Var> {
    let fusion = comp.fusion(FUSION)?;
    let mut inputs = Vec::with_capacity(fusion.modalities.len());
    for &m in &fusion.modalities {
        let feature = match m {
            Modality::Ct => match images {
                Some(x) => Some(tape.constant(x)?),
                None => None,
            },
            Modality::Text => match texts {
                Some(ids) => {
                    let hooks = comp.encoder_hooks(tape, adapters, path(Modality::Text))?;
                    let pooled = ids
                        .iter()
                        .map(|t| Ok(model.encode_text_on(tape, base, t, &hooks)?.pooled))
                        .collect::<Result<Vec<_>>>()?;
                    Some(stack_rows(tape, &pooled)?)
                }
                None => None,
            },
            Modality::Pet => None,
        };
        inputs.push(match feature {
            Some(x) => {
                let name = format!("{}.mlp", path(m));
                Some(comp.mlp(&name)?.forward(tape, adapters, &name, x)?)
            }
            None => None,
        });
    }
    let fused = fusion_forward(tape, adapters, FUSION, fusion, &inputs)?;
    comp.mlp(HEAD)?.forward(tape, adapters, HEAD, fused)
}

/// Head applied to the frozen text embedding, or to zeros without text.
/// A fresh prognosis composition reproduces this exactly.
pub fn prognosis_reference(
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    batch: usize,
    texts: Option<&[Vec<usize>]>,
) -> Result<Tensor> {
    let s = model.config().text.proj_dim;
    let feats = match texts {
        Some(ids) => {
            let mut data = Vec::with_capacity(ids.len() * s);
            for t in ids {
                data.extend_from_slice(model.encode_text(t)?.pooled.data());
            }
            Tensor::new(&[ids.len(), s], data)?
        }
        None => Tensor::zeros(&[batch, s]),
    };
    let mut tape = Tape::new();
    let x = tape.constant(&feats)?;
    let y = comp
        .mlp(HEAD)?
        .forward(&mut tape, &mut Binder::frozen(), HEAD, x)?;
    Ok(tape.value(y).clone())
}

/// Frozen pooled CT features of many volumes, `[B × s]`.
pub fn image_features(model: &FrozenFoundation, volumes: &[&Tensor]) -> Result<Tensor> {
    let s = model.config().vision.proj_dim;
    let mut data = Vec::with_capacity(volumes.len() * s);
    for v in volumes {
        data.extend_from_slice(model.encode_image(v)?.pooled.data());
    }
    Tensor::new(&[volumes.len(), s], data)
}

/// Sizes of a segmentation composition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationPlan {
    pub shape: [usize; 3],
    pub patch: usize,
    pub rank: usize,
    pub alpha: f64,
    pub decoder_init_std: f64,
}

/// CT re-embedding (a copy of the frozen embedding at the base resolution),
/// CT LoRA on Q/V, and a token decoder.
pub fn build_seg_ct<R: Rng + ?Sized>(
    model: &FrozenFoundation,
    plan: &SegmentationPlan,
    rng: &mut R,
) -> Result<AdapterComposition> {
    let mut c = AdapterComposition::new(RoutingKey::seg_ct());
    let ct = path(Modality::Ct);
    let reembed = ResolutionReembed::from_base(model, plan.shape, plan.patch, rng)?;
    c.push(format!("{ct}.reembed"), AdapterModule::Reembed(reembed))?;
    let targets = crate::adapters::qv_targets(model, "vision");
    c.attach_lora(model, ct, &targets, plan.rank, plan.alpha, rng)?;
    let d = model.config().vision.embed_dim;
    let decoder = DecoderAdapter::new(d, plan.patch, plan.shape, plan.decoder_init_std, rng)?;
    c.push(DECODER, AdapterModule::Decoder(decoder))?;
    Ok(c)
}

/// Copies every CT module and the decoder from the CT-only composition,
/// adds a PET re-embedding and PET LoRA, and a token fusion that starts as
/// the CT pass-through. The result owns its own copies.
pub fn build_seg_ctpet<R: Rng + ?Sized>(
    model: &FrozenFoundation,
    seg_ct: &AdapterComposition,
    plan: &SegmentationPlan,
    hidden: usize,
    rng: &mut R,
) -> Result<AdapterComposition> {
    let mut c = AdapterComposition::new(RoutingKey::seg_ctpet());
    for (name, m) in seg_ct.modules() {
        c.push(name, m.clone())?;
    }
    let pet = path(Modality::Pet);
    let reembed = ResolutionReembed::from_base(model, plan.shape, plan.patch, rng)?;
    c.push(format!("{pet}.reembed"), AdapterModule::Reembed(reembed))?;
    let targets = crate::adapters::qv_targets(model, "vision");
    c.attach_lora(model, pet, &targets, plan.rank, plan.alpha, rng)?;
    let d = model.config().vision.embed_dim;
    let fusion = FusionAdapter::new(
        &[
            (Modality::Ct, d, ProjectionInit::Identity),
            (Modality::Pet, d, ProjectionInit::Zero),
        ],
        d,
        hidden,
        rng,
    )?;
    c.push(FUSION, AdapterModule::Fusion(fusion))?;
    Ok(c)
}

/// Voxel logits `[D×H×W]` for one case.
pub fn segmentation_forward(
    tape: &mut Tape,
    base: &mut Binder,
    adapters: &mut Binder,
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    ct: &Tensor,
    pet: Option<&Tensor>,
) -> Result<Var> {
    let encode = |tape: &mut Tape,
                  base: &mut Binder,
                  adapters: &mut Binder,
                  m: Modality,
                  vol: &Tensor|
     -> Result<Var> {
        let hooks = comp.encoder_hooks(tape, adapters, path(m))?;
        Ok(model.encode_image_on(tape, base, vol, &hooks)?.tokens)
    };
    let tokens = match comp.get(FUSION) {
        Some(AdapterModule::Fusion(fusion)) => {
            let mut inputs = Vec::with_capacity(fusion.modalities.len());
            for &m in &fusion.modalities {
                let vol = match m {
                    Modality::Ct => Some(ct),
                    Modality::Pet => pet,
                    Modality::Text => None,
                };
                inputs.push(match vol {
                    Some(v) => Some(encode(tape, base, adapters, m, v)?),
                    None => None,
                });
            }
            fusion_forward(tape, adapters, FUSION, fusion, &inputs)?
        }
        _ => encode(tape, base, adapters, Modality::Ct, ct)?,
    };
    decode_segmentation(tape, adapters, DECODER, comp.decoder(DECODER)?, tokens)
}

/// Decoder applied to frozen CT tokens. A fresh CT-only composition at the
/// base resolution reproduces this exactly.
pub fn segmentation_reference(
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    ct: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut base = Binder::frozen();
    let tokens = model
        .encode_image_on(&mut tape, &mut base, ct, &EncoderHooks::default())?
        .tokens;
    let y = decode_segmentation(
        &mut tape,
        &mut Binder::frozen(),
        DECODER,
        comp.decoder(DECODER)?,
        tokens,
    )?;
    Ok(tape.value(y).clone())
}

/// Output of one route on one case, without gradients. Classification
/// returns prompt scores `[C]`, prognosis the head outputs `[out]`,
/// segmentation the voxel logits.
pub fn route_output(
    model: &FrozenFoundation,
    comp: &AdapterComposition,
    input: &CaseInput,
    prompts: &[Vec<usize>],
) -> Result<Tensor> {
    let key = comp.key;
    match key.task {
        Task::Classification => {
            let c = classify(model, &input.ct, prompts)?;
            Tensor::new(&[c.scores.len()], c.scores)
        }
        Task::Prognosis => {
            let image = key
                .modalities
                .contains(Modality::Ct)
                .then(|| image_features(model, &[&input.ct]))
                .transpose()?;
            let texts = [input.text.clone()];
            let texts = key
                .modalities
                .contains(Modality::Text)
                .then_some(&texts[..]);
            let mut tape = Tape::new();
            let y = prognosis_forward(
                &mut tape,
                &mut Binder::frozen(),
                &mut Binder::frozen(),
                model,
                comp,
                image.as_ref(),
                texts,
            )?;
            let v = tape.value(y);
            v.reshape(&[v.numel()])
        }
        Task::Segmentation => {
            let pet = key.modalities.contains(Modality::Pet).then_some(&input.pet);
            let mut tape = Tape::new();
            let y = segmentation_forward(
                &mut tape,
                &mut Binder::frozen(),
                &mut Binder::frozen(),
                model,
                comp,
                &input.ct,
                pet,
            )?;
            Ok(tape.value(y).clone())
        }
    }
}

/// Routes the key and runs it.
pub fn serve(
    model: &FrozenFoundation,
    registry: &AdapterRegistry,
    key: &RoutingKey,
    input: &CaseInput,
    prompts: &[Vec<usize>],
) -> Result<Tensor> {
    let comp = registry.route(key)?;
    route_output(model, &comp, input, prompts)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::adapters::AdapterRegistry;
    use crate::data::{generate_case, GenParams};
    use crate::foundation::FoundationConfig;

    fn small() -> FrozenFoundation {
        let mut cfg = FoundationConfig::default();
        cfg.vision.volume_shape = [16, 16, 16];
        cfg.vision.layers = 1;
        cfg.text.layers = 1;
        let mut m = FrozenFoundation::init(cfg, 5).unwrap();
        m.freeze();
        m
    }

    fn input(model: &FrozenFoundation, i: u64) -> CaseInput {
        let mut p = GenParams::default();
        p.shape = [16, 16, 16];
        p.radius_min = 2.0;
        p.radius_max = 4.0;
        let case = generate_case(3, i, &p).unwrap();
        let spec = PreprocessSpec {
            target_resolution: [16, 16, 16],
            ..Default::default()
        };
        prepare_case(&case, &spec, &report_tokenizer(model).unwrap()).unwrap()
    }

    fn prog_plan() -> PrognosisPlan {
        PrognosisPlan {
            model: SurvivalModel::DeepHit,
            bins: 4,
            rank: 2,
            alpha: 4.0,
            hidden: 8,
        }
    }

    #[test]
    fn fresh_prognosis_matches_reference_for_every_input_set() {
        let model = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let comp = build_prognosis(&model, &prog_plan(), &mut rng).unwrap();
        let cases: Vec<CaseInput> = (0..3).map(|i| input(&model, i)).collect();
        let vols: Vec<&Tensor> = cases.iter().map(|c| &c.ct).collect();
        let img = image_features(&model, &vols).unwrap();
        let texts: Vec<Vec<usize>> = cases.iter().map(|c| c.text.clone()).collect();
        for mode in [
            PrognosisInputs::ImageText,
            PrognosisInputs::TextOnly,
            PrognosisInputs::ImageOnly,
        ] {
            let mut tape = Tape::new();
            let y = prognosis_forward(
                &mut tape,
                &mut Binder::frozen(),
                &mut Binder::trainable(),
                &model,
                &comp,
                mode.image().then_some(&img),
                mode.text().then_some(&texts[..]),
            )
            .unwrap();
            let want =
                prognosis_reference(&model, &comp, 3, mode.text().then_some(&texts[..])).unwrap();
            assert_eq!(tape.value(y), &want, "{mode:?}");
        }
    }

    #[test]
    fn fresh_segmentation_matches_reference_and_copy_init() {
        let model = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = SegmentationPlan {
            shape: [16, 16, 16],
            patch: 8,
            rank: 2,
            alpha: 4.0,
            decoder_init_std: 0.05,
        };
        let ct = build_seg_ct(&model, &plan, &mut rng).unwrap();
        let ctpet = build_seg_ctpet(&model, &ct, &plan, 16, &mut rng).unwrap();
        let x = input(&model, 4);
        let want = segmentation_reference(&model, &ct, &x.ct).unwrap();
        assert_eq!(route_output(&model, &ct, &x, &[]).unwrap(), want);
        assert_eq!(route_output(&model, &ctpet, &x, &[]).unwrap(), want);
    }

    #[test]
    fn classification_route_scores_prompts() {
        let model = small();
        let tok = report_tokenizer(&model).unwrap();
        let prompts = class_prompt_ids(&tok);
        let reg = AdapterRegistry::base();
        let x = input(&model, 0);
        let y = serve(&model, &reg, &RoutingKey::classification(), &x, &prompts).unwrap();
        assert_eq!(y.shape(), &[2]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(
            serve(&model, &reg, &RoutingKey::prognosis(), &x, &prompts),
            Err(Error::Routing { .. })
        ));
    }

    #[test]
    fn stacking_rows_keeps_order() {
        let mut tape = Tape::new();
        let a = tape
            .constant(&Tensor::new(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = tape
            .constant(&Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let s = stack_rows(&mut tape, &[a, b]).unwrap();
        assert_eq!(
            tape.value(s),
            &Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
        );
    }
}

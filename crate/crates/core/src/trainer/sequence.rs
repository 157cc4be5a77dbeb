use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterRegistry, RoutingKey};
use crate::data::{generate_cohort, split_folds, GenParams, PreprocessSpec, SyntheticCase};
use crate::error::{Error, Result};
use crate::foundation::{
    chest_corpus, chest_params, pretrain_base, FrozenFoundation, PretrainReport,
};
use crate::metrics::{forgetting_audit, write_reports, AuditReport, EvalReport, ProbeSnapshot};
use crate::optim::AdamWConfig;
use crate::params::Parameters;
use crate::tasks::{
    build_prognosis, build_seg_ct, build_seg_ctpet, class_prompt_ids, classify, prepare_case,
    report_tokenizer, route_output, CaseInput, PrognosisPlan, SegmentationPlan,
};

use super::checkpoint::{load_base, save_adapters, save_base, ProbeSet};
use super::config::{RunConfig, Step1Section};
use super::prognosis::{prognosis_cohort, train_prognosis, PrognosisData, PrognosisTrainConfig};
use super::segmentation::{train_segmentation, SegmentationTrainConfig};
use super::StepOutcome;

/// Every route the engine knows, in sequence order.
pub fn all_routes() -> [RoutingKey; 4] {
    [
        RoutingKey::classification(),
        RoutingKey::prognosis(),
        RoutingKey::seg_ct(),
        RoutingKey::seg_ctpet(),
    ]
}

/// Which routes are servable, by route label, before and after adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capability {
    pub base: BTreeMap<String, bool>,
    pub adapted: BTreeMap<String, bool>,
}

#[derive(Debug)]
pub struct SequenceOutcome {
    pub model: FrozenFoundation,
    pub registry: AdapterRegistry,
    pub reports: Vec<EvalReport>,
    pub audits: Vec<AuditReport>,
    pub capability: Capability,
    pub probes: BTreeMap<RoutingKey, ProbeSet>,
    /// Training outcome per adaptation step index.
    pub steps: BTreeMap<usize, StepOutcome>,
}

/// Independent stream seed for one purpose.
fn derive(master: u64, purpose: u64) -> u64 {
    master ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Output directory writer; a no-op without a directory.
struct Outputs {
    dir: Option<PathBuf>,
    curves: bool,
}

impl Outputs {
    fn create(dir: Option<&Path>, curves: bool) -> Result<Self> {
        if let Some(d) = dir {
            for sub in ["checkpoints", "probes", "curves"] {
                if sub == "curves" && !curves {
                    continue;
                }
                let p = d.join(sub);
                fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
            for f in ["report.jsonl", "audit.jsonl"] {
                let p = d.join(f);
                fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(Self {
            dir: dir.map(Path::to_path_buf),
            curves,
        })
    }

    fn path(&self, rel: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(rel))
    }

    fn text(&self, rel: &str, text: &str) -> Result<()> {
        if let Some(p) = self.path(rel) {
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn append(&self, rel: &str, line: &str) -> Result<()> {
        if let Some(p) = self.path(rel) {
            use std::io::Write;
            let mut f = fs::OpenOptions::new()
                .append(true)
                .create(true)
                .open(&p)
                .map_err(|e| Error::io(&p, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn reports(&self, reports: &[EvalReport]) -> Result<()> {
        match self.path("report.jsonl") {
            Some(p) => write_reports(&p, reports),
            None => Ok(()),
        }
    }

    fn curve(&self, rel: &str, outcome: &StepOutcome) -> Result<()> {
        if !self.curves {
            return Ok(());
        }
        let mut s = String::from("epoch,steps,train_loss,val_metric\n");
        for r in &outcome.history {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.steps, r.train_loss, r.val_metric
            ));
        }
        self.text(rel, &s)
    }
}

fn pretrain_curve(r: &PretrainReport) -> String {
    let mut s = String::from("epoch,train_loss,val_accuracy\n");
    for (i, (l, a)) in r.train_loss.iter().zip(&r.val_accuracy).enumerate() {
        s.push_str(&format!("{},{l},{a}\n", i + 1));
    }
    s
}

/// Servability of every route: routed, run on the route's probe input, and
/// finite output.
pub fn capability_row(
    model: &FrozenFoundation,
    registry: &AdapterRegistry,
    probes: &BTreeMap<RoutingKey, ProbeSet>,
    prompts: &[Vec<usize>],
) -> BTreeMap<String, bool> {
    all_routes()
        .iter()
        .map(|key| {
            let ok = match (
                registry.route(key),
                probes.get(key).and_then(|p| p.inputs.first()),
            ) {
                (Ok(comp), Some(input)) => {
                    route_output(model, &comp, input, prompts).is_ok_and(|y| y.is_finite())
                }
                _ => false,
            };
            (key.label(), ok)
        })
        .collect()
}

fn probe_set(
    model: &FrozenFoundation,
    registry: &AdapterRegistry,
    key: RoutingKey,
    step: usize,
    inputs: Vec<CaseInput>,
    prompts: &[Vec<usize>],
) -> Result<ProbeSet> {
    let comp = registry.route(&key)?;
    let outputs = inputs
        .iter()
        .map(|x| route_output(model, &comp, x, prompts))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProbeSet {
        key,
        step,
        inputs,
        outputs,
    })
}

/// Replays every earlier route's probes; fails unless all deviations are 0.
pub fn audit_routes(
    model: &FrozenFoundation,
    registry: &AdapterRegistry,
    probes: &BTreeMap<RoutingKey, ProbeSet>,
    after_step: usize,
    prompts: &[Vec<usize>],
) -> Result<AuditReport> {
    let expected: Vec<RoutingKey> = probes.keys().copied().collect();
    let snaps: BTreeMap<RoutingKey, ProbeSnapshot> =
        probes.iter().map(|(k, p)| (*k, p.snapshot())).collect();
    forgetting_audit(after_step, &expected, &snaps, |key| {
        // A route that no longer resolves replays nothing and fails.
        let Ok(comp) = registry.route(key) else {
            return Ok(Vec::new());
        };
        probes[key]
            .inputs
            .iter()
            .map(|x| route_output(model, &comp, x, prompts))
            .collect()
    })
}

fn prepare_all(
    cases: &[SyntheticCase],
    shape: [usize; 3],
    model: &FrozenFoundation,
) -> Result<Vec<CaseInput>> {
    let tok = report_tokenizer(model)?;
    let spec = PreprocessSpec {
        target_resolution: shape,
        ..Default::default()
    };
    cases.iter().map(|c| prepare_case(c, &spec, &tok)).collect()
}

fn hn_params(cfg: &RunConfig, shape: [usize; 3], complementarity: bool) -> GenParams {
    GenParams {
        shape,
        radius_min: cfg.data.radius_min,
        radius_max: cfg.data.radius_max,
        censor_prob: cfg.data.censor_prob,
        complementarity,
        ..GenParams::default()
    }
}

/// Scored chest cases for the classification route; the first
/// `output.probes` also serve as its probes.
pub struct ChestEval {
    pub cases: Vec<SyntheticCase>,
    pub inputs: Vec<CaseInput>,
}

/// One generated cohort as the sequence uses it.
#[derive(Clone, Debug)]
pub struct Cohort {
    pub name: &'static str,
    pub cases: Vec<SyntheticCase>,
    pub folds: Option<Vec<usize>>,
    pub params: GenParams,
    pub seed: u64,
}

fn cohort(
    name: &'static str,
    seed: u64,
    n: usize,
    params: GenParams,
    folds: Option<(usize, u64)>,
) -> Result<Cohort> {
    let cases = generate_cohort(seed, n, &params)?;
    let folds = match folds {
        Some((k, fold_seed)) => {
            let events: Vec<bool> = cases.iter().map(|c| c.event).collect();
            Some(split_folds(&events, k, fold_seed)?)
        }
        None => None,
    };
    Ok(Cohort {
        name,
        cases,
        folds,
        params,
        seed,
    })
}

fn chest_cohort(cfg: &RunConfig, seed: u64) -> Result<Cohort> {
    let n = cfg.data.chest_eval_cases.max(cfg.output.probes);
    cohort(
        "chest",
        derive(seed, 7),
        n,
        chest_params([cfg.base.volume; 3]),
        None,
    )
}

fn prognosis_cohorts(cfg: &RunConfig, seed: u64) -> Result<(Cohort, Cohort)> {
    let params = hn_params(cfg, [cfg.base.volume; 3], false);
    let folds = Some((cfg.data.folds, derive(seed, 4)));
    Ok((
        cohort(
            "prognosis",
            derive(seed, 3),
            cfg.data.prognosis_cases,
            params.clone(),
            folds,
        )?,
        cohort(
            "prognosis-probes",
            derive(seed, 8),
            cfg.output.probes,
            params,
            None,
        )?,
    ))
}

fn segmentation_cohorts(cfg: &RunConfig, seed: u64, resolution: usize) -> Result<(Cohort, Cohort)> {
    let params = hn_params(cfg, [resolution; 3], cfg.data.complementarity);
    let folds = Some((cfg.data.folds, derive(seed, 6)));
    Ok((
        cohort(
            "segmentation",
            derive(seed, 5),
            cfg.data.segmentation_cases,
            params.clone(),
            folds,
        )?,
        cohort(
            "segmentation-probes",
            derive(seed, 9),
            cfg.output.probes,
            params,
            None,
        )?,
    ))
}

/// Every cohort a run with this configuration and seed generates.
pub fn run_cohorts(cfg: &RunConfig, seed: u64) -> Result<Vec<Cohort>> {
    let mut out = vec![chest_cohort(cfg, seed)?];
    if cfg.step1.is_some() {
        let (a, b) = prognosis_cohorts(cfg, seed)?;
        out.extend([a, b]);
    }
    if let Some(s2) = &cfg.step2 {
        let (a, b) = segmentation_cohorts(cfg, seed, s2.resolution)?;
        out.extend([a, b]);
    }
    Ok(out)
}

pub fn chest_eval(cfg: &RunConfig, seed: u64, model: &FrozenFoundation) -> Result<ChestEval> {
    let shape = model.config().vision.volume_shape;
    let cases = chest_cohort(cfg, seed)?.cases;
    let inputs = prepare_all(&cases, shape, model)?;
    Ok(ChestEval { cases, inputs })
}

/// Zero-shot accuracy over the first `data.chest_eval_cases` chest cases.
pub fn chest_accuracy(
    cfg: &RunConfig,
    model: &FrozenFoundation,
    eval: &ChestEval,
) -> Result<(f64, usize)> {
    let prompts = class_prompt_ids(&report_tokenizer(model)?);
    let n = cfg.data.chest_eval_cases.min(eval.cases.len());
    let mut hits = 0;
    for (c, x) in eval.cases.iter().zip(&eval.inputs).take(n) {
        hits += (classify(model, &x.ct, &prompts)?.label == c.class_label as usize) as usize;
    }
    Ok((
        if n == 0 {
            f64::NAN
        } else {
            hits as f64 / n as f64
        },
        n,
    ))
}

/// The prognosis cohort with its folds, and the probe inputs of the route.
pub fn prognosis_dataset(
    cfg: &RunConfig,
    seed: u64,
    model: &FrozenFoundation,
) -> Result<(PrognosisData, Vec<CaseInput>)> {
    let shape = model.config().vision.volume_shape;
    let (main, probes) = prognosis_cohorts(cfg, seed)?;
    let folds = main.folds.expect("cohort split into folds");
    let data = prognosis_cohort(model, &main.cases, folds)?;
    Ok((data, prepare_all(&probes.cases, shape, model)?))
}

/// Segmentation cases at the step-2 resolution, split by fold.
#[derive(Clone, Debug)]
pub struct SegmentationData {
    pub train: Vec<CaseInput>,
    pub val: Vec<CaseInput>,
    pub probes: Vec<CaseInput>,
}

pub fn segmentation_dataset(
    cfg: &RunConfig,
    seed: u64,
    model: &FrozenFoundation,
    resolution: usize,
) -> Result<SegmentationData> {
    let shape = [resolution; 3];
    let (main, probes) = segmentation_cohorts(cfg, seed, resolution)?;
    let folds = main.folds.expect("cohort split into folds");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (x, f) in prepare_all(&main.cases, shape, model)?
        .into_iter()
        .zip(&folds)
    {
        if *f == cfg.data.val_fold {
            val.push(x)
        } else {
            train.push(x)
        }
    }
    Ok(SegmentationData {
        train,
        val,
        probes: prepare_all(&probes.cases, shape, model)?,
    })
}

pub(crate) fn prognosis_train_config(s1: &Step1Section) -> PrognosisTrainConfig {
    PrognosisTrainConfig {
        optim: AdamWConfig::new(s1.lr, s1.weight_decay),
        epochs: s1.epochs,
        batch_size: s1.batch_size,
        inputs: s1.inputs,
        model: s1.model,
        ..PrognosisTrainConfig::default()
    }
}

/// Pre-trains (or loads) the base, then runs the configured adaptation
/// steps in order. With `out`, every artifact is written under it; reports
/// are flushed after each step so a failure leaves the earlier ones.
pub fn run_sequence(cfg: &RunConfig, seed: u64, out: Option<&Path>) -> Result<SequenceOutcome> {
    cfg.validate()?;
    let io = Outputs::create(out, cfg.output.curves)?;
    io.text("config.json", &serde_json::to_string_pretty(&(cfg, seed))?)?;

    let model = match &cfg.base.checkpoint {
        Some(path) => load_base(path)?,
        None => {
            let init = FrozenFoundation::init(cfg.base.foundation(), derive(seed, 1))?;
            let pcfg = cfg.base.pretrain(derive(seed, 2));
            let (train, val) = chest_corpus(&init, &pcfg)?;
            let (model, report) = pretrain_base(init, &train, &val, &pcfg)?;
            if io.curves {
                io.text("curves/base.csv", &pretrain_curve(&report))?;
            }
            model
        }
    };
    let base_hash = model
        .base_hash()
        .ok_or_else(|| Error::Contract("base model is not frozen".into()))?
        .to_string();
    if let Some(p) = io.path("checkpoints/base.bin") {
        save_base(&p, &model)?;
    }
    let prompts = class_prompt_ids(&report_tokenizer(&model)?);
    let mut registry = AdapterRegistry::base();
    let mut probes: BTreeMap<RoutingKey, ProbeSet> = BTreeMap::new();
    let mut reports = Vec::new();
    let mut audits = Vec::new();
    let mut steps = BTreeMap::new();

    // Classification route: the frozen base itself.
    let chest = chest_eval(cfg, seed, &model)?;
    let (accuracy, n_eval) = chest_accuracy(cfg, &model, &chest)?;
    let cls = RoutingKey::classification();
    let set = probe_set(
        &model,
        &registry,
        cls,
        0,
        chest.inputs[..cfg.output.probes].to_vec(),
        &prompts,
    )?;
    if let Some(p) = io.path("probes/step0.bin") {
        set.write(&p, &base_hash)?;
    }
    probes.insert(cls, set);
    let base_capability = capability_row(&model, &registry, &probes, &prompts);
    let r = EvalReport {
        step: 0,
        task: cls.label(),
        metric: "accuracy".into(),
        value: accuracy,
        n: n_eval,
        fold: None,
    };
    io.reports(std::slice::from_ref(&r))?;
    reports.push(r);

    let mut finish_step = |m: usize,
                           outcome: StepOutcome,
                           metric: &str,
                           n: usize,
                           probe_inputs: Vec<CaseInput>,
                           registry: &mut AdapterRegistry,
                           probes: &mut BTreeMap<RoutingKey, ProbeSet>|
     -> Result<()> {
        let key = outcome.composition.key;
        io.curve(&format!("curves/step{m}.csv"), &outcome)?;
        registry.register(key, outcome.composition.clone())?;
        if let Some(p) = io.path(&format!("checkpoints/step{m}.bin")) {
            save_adapters(&p, &[&outcome.composition], &base_hash)?;
        }
        let audit = audit_routes(&model, registry, probes, m, &prompts)?;
        io.append("audit.jsonl", &serde_json::to_string(&audit)?)?;
        let pass = audit.pass;
        audits.push(audit);
        if !pass {
            return Err(Error::AuditFailure {
                step: m,
                detail: "an earlier route's probe outputs changed".into(),
            });
        }
        let set = probe_set(&model, registry, key, m, probe_inputs, &prompts)?;
        if let Some(p) = io.path(&format!("probes/step{m}.bin")) {
            set.write(&p, &base_hash)?;
        }
        probes.insert(key, set);
        let r = EvalReport {
            step: m,
            task: key.label(),
            metric: metric.into(),
            value: outcome.best_metric,
            n,
            fold: Some(cfg.data.val_fold),
        };
        io.reports(std::slice::from_ref(&r))?;
        reports.push(r);
        log::info!(
            "step {m} {}: best {metric} {:.4} at epoch {}",
            key.label(),
            outcome.best_metric,
            outcome.best_epoch
        );
        steps.insert(m, outcome);
        Ok(())
    };

    if let Some(s1) = &cfg.step1 {
        let (data, probe_inputs) = prognosis_dataset(cfg, seed, &model)?;
        let plan = PrognosisPlan {
            model: s1.model,
            bins: s1.bins,
            rank: s1.rank,
            alpha: s1.alpha,
            hidden: s1.hidden,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, 11));
        let comp = build_prognosis(&model, &plan, &mut rng)?;
        let outcome = train_prognosis(
            &model,
            comp,
            &data,
            cfg.data.val_fold,
            &prognosis_train_config(s1),
            &mut rng,
        )?;
        let n_val = data
            .folds
            .iter()
            .filter(|&&f| f == cfg.data.val_fold)
            .count();
        finish_step(
            1,
            outcome,
            "c_index",
            n_val,
            probe_inputs,
            &mut registry,
            &mut probes,
        )?;
    }

    if let Some(s2) = &cfg.step2 {
        let data = segmentation_dataset(cfg, seed, &model, s2.resolution)?;
        let plan = SegmentationPlan {
            shape: [s2.resolution; 3],
            patch: s2.patch,
            rank: s2.rank,
            alpha: s2.alpha,
            decoder_init_std: s2.decoder_init_std,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, 12));
        let comp = build_seg_ct(&model, &plan, &mut rng)?;
        let tcfg = SegmentationTrainConfig {
            optim: AdamWConfig::new(s2.lr, s2.weight_decay),
            steps: s2.steps,
            ..SegmentationTrainConfig::default()
        };
        let outcome = train_segmentation(&model, comp, &data.train, &data.val, &tcfg, &mut rng)?;
        let seg_ct = outcome.composition.clone();
        let n_val = data.val.len();
        finish_step(
            2,
            outcome,
            "dice",
            n_val,
            data.probes.clone(),
            &mut registry,
            &mut probes,
        )?;

        if let Some(s3) = &cfg.step3 {
            let plan = SegmentationPlan {
                rank: s3.rank,
                alpha: s3.alpha,
                ..plan
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, 13));
            let comp = build_seg_ctpet(&model, &seg_ct, &plan, s3.hidden, &mut rng)?;
            let tcfg = SegmentationTrainConfig {
                optim: AdamWConfig::new(s3.lr, s3.weight_decay),
                steps: s3.steps,
                ..SegmentationTrainConfig::default()
            };
            let outcome =
                train_segmentation(&model, comp, &data.train, &data.val, &tcfg, &mut rng)?;
            finish_step(
                3,
                outcome,
                "dice",
                n_val,
                data.probes,
                &mut registry,
                &mut probes,
            )?;
        }
    }

    // Nothing registered may have changed after registration, and the base
    // hash must still describe the base arrays.
    if model.compute_hash() != base_hash {
        return Err(Error::Integrity(
            "base arrays changed during adaptation".into(),
        ));
    }
    for (m, outcome) in &steps {
        let key = outcome.composition.key;
        if registry.route(&key)?.digests() != outcome.composition.digests() {
            return Err(Error::Integrity(format!(
                "composition of step {m} changed after registration"
            )));
        }
    }
    let final_audit = audit_routes(
        &model,
        &registry,
        &probes,
        steps.keys().max().copied().unwrap_or(0),
        &prompts,
    )?;
    if !final_audit.pass {
        return Err(Error::AuditFailure {
            step: final_audit.after_step,
            detail: "final replay of all routes deviated".into(),
        });
    }
    let capability = Capability {
        base: base_capability,
        adapted: capability_row(&model, &registry, &probes, &prompts),
    };
    io.text(
        "capability.json",
        &serde_json::to_string_pretty(&capability)?,
    )?;
    Ok(SequenceOutcome {
        model,
        registry,
        reports,
        audits,
        capability,
        probes,
        steps,
    })
}

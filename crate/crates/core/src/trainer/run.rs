//! Reloading a finished run directory: its configuration, base model,
//! registered compositions and probes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::adapters::{AdapterRegistry, RoutingKey};
use crate::error::{Error, Result};
use crate::foundation::FrozenFoundation;
use crate::metrics::{AuditReport, EvalReport};
use crate::tasks::{class_prompt_ids, report_tokenizer};

use super::checkpoint::{load_adapters, load_base, ProbeSet};
use super::config::RunConfig;
use super::prognosis::prognosis_c_index;
use super::segmentation::mean_dice;
use super::sequence::{
    audit_routes, chest_accuracy, chest_eval, prognosis_dataset, prognosis_train_config,
    segmentation_dataset,
};

/// Adaptation step indices, in order.
pub const STEPS: [usize; 3] = [1, 2, 3];

#[derive(Debug)]
pub struct LoadedRun {
    pub config: RunConfig,
    pub seed: u64,
    pub model: FrozenFoundation,
    pub registry: AdapterRegistry,
    pub probes: BTreeMap<RoutingKey, ProbeSet>,
    /// Steps whose adapter checkpoint was found.
    pub steps: Vec<usize>,
}

/// Reads `config.json`, `checkpoints/` and `probes/` under `dir`. Every
/// container is digest-checked and every adapter or probe file must name
/// the loaded base.
pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let path = dir.join("config.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (config, seed): (RunConfig, u64) = serde_json::from_str(&text)?;
    let model = load_base(&dir.join("checkpoints").join("base.bin"))?;
    let hash = model
        .base_hash()
        .ok_or_else(|| Error::Integrity("stored base model is not frozen".into()))?
        .to_string();
    let mut registry = AdapterRegistry::base();
    let mut steps = Vec::new();
    for m in STEPS {
        let p = dir.join("checkpoints").join(format!("step{m}.bin"));
        if p.exists() {
            for comp in load_adapters(&p, &hash)? {
                comp.validate(&model)?;
                registry.register(comp.key, comp)?;
            }
            steps.push(m);
        }
    }
    let mut probes = BTreeMap::new();
    for m in std::iter::once(0).chain(STEPS) {
        let p = dir.join("probes").join(format!("step{m}.bin"));
        if p.exists() {
            let set = ProbeSet::read(&p, &hash)?;
            probes.insert(set.key, set);
        }
    }
    Ok(LoadedRun {
        config,
        seed,
        model,
        registry,
        probes,
        steps,
    })
}

/// Replays every recorded probe against the stored compositions.
pub fn audit_run(dir: &Path) -> Result<AuditReport> {
    let run = load_run(dir)?;
    if run.probes.is_empty() {
        return Err(Error::AuditConfig(format!(
            "no probes recorded under {}",
            dir.display()
        )));
    }
    let prompts = class_prompt_ids(&report_tokenizer(&run.model)?);
    let after = run.steps.last().copied().unwrap_or(0);
    audit_routes(&run.model, &run.registry, &run.probes, after, &prompts)
}

/// Recomputes each registered route's validation metric from the stored
/// artifacts, regenerating the cohorts from the recorded seed.
pub fn evaluate_run(dir: &Path) -> Result<Vec<EvalReport>> {
    let LoadedRun {
        config: cfg,
        seed,
        model,
        registry,
        steps,
        ..
    } = load_run(dir)?;
    let mut out = Vec::new();
    let chest = chest_eval(&cfg, seed, &model)?;
    let (accuracy, n) = chest_accuracy(&cfg, &model, &chest)?;
    out.push(EvalReport {
        step: 0,
        task: RoutingKey::classification().label(),
        metric: "accuracy".into(),
        value: accuracy,
        n,
        fold: None,
    });
    let fold = cfg.data.val_fold;
    if let (Some(s1), true) = (&cfg.step1, steps.contains(&1)) {
        let (data, _) = prognosis_dataset(&cfg, seed, &model)?;
        let val: Vec<usize> = (0..data.len()).filter(|&i| data.folds[i] == fold).collect();
        let comp = registry.route(&RoutingKey::prognosis())?;
        out.push(EvalReport {
            step: 1,
            task: comp.key.label(),
            metric: "c_index".into(),
            value: prognosis_c_index(&model, &comp, &data, &val, &prognosis_train_config(s1))?,
            n: val.len(),
            fold: Some(fold),
        });
    }
    if let Some(s2) = &cfg.step2 {
        let data = segmentation_dataset(&cfg, seed, &model, s2.resolution)?;
        for (m, key) in [(2, RoutingKey::seg_ct()), (3, RoutingKey::seg_ctpet())] {
            if !steps.contains(&m) {
                continue;
            }
            let comp = registry.route(&key)?;
            out.push(EvalReport {
                step: m,
                task: key.label(),
                metric: "dice".into(),
                value: mean_dice(&model, &comp, &data.val)?,
                n: data.val.len(),
                fold: Some(fold),
            });
        }
    }
    Ok(out)
}

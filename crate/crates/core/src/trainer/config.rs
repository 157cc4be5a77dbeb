//! Run configuration: `key = value` lines under `[section]` headers.
//!
//! Sections are `base`, `data`, `step1`, `step2`, `step3` and `output`. A
//! step runs only when its section is present. Unknown sections and keys
//! are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use ini::Ini;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foundation::{FoundationConfig, PretrainConfig};
use crate::heads::SurvivalModel;
use crate::tasks::PrognosisInputs;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseSection {
    /// Load this frozen checkpoint instead of pre-training.
    pub checkpoint: Option<PathBuf>,
    pub volume: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub proj_dim: usize,
    pub text_layers: usize,
    pub max_tokens: usize,
    pub corpus: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub target_accuracy: f64,
}

impl Default for BaseSection {
    fn default() -> Self {
        let f = FoundationConfig::default();
        let p = PretrainConfig::default();
        Self {
            checkpoint: None,
            volume: f.vision.volume_shape[0],
            patch: f.vision.patch_size,
            embed_dim: f.vision.embed_dim,
            layers: f.vision.layers,
            heads: f.vision.heads,
            mlp_dim: f.vision.mlp_dim,
            proj_dim: f.vision.proj_dim,
            text_layers: f.text.layers,
            max_tokens: f.text.max_tokens,
            corpus: p.corpus_size,
            epochs: p.max_epochs,
            batch_size: p.batch_size,
            lr: p.lr,
            weight_decay: p.weight_decay,
            target_accuracy: p.target_accuracy,
        }
    }
}

impl BaseSection {
    pub fn foundation(&self) -> FoundationConfig {
        let mut f = FoundationConfig::default();
        f.vision.volume_shape = [self.volume; 3];
        f.vision.patch_size = self.patch;
        f.vision.embed_dim = self.embed_dim;
        f.vision.layers = self.layers;
        f.vision.heads = self.heads;
        f.vision.mlp_dim = self.mlp_dim;
        f.vision.proj_dim = self.proj_dim;
        f.text.embed_dim = self.embed_dim;
        f.text.layers = self.text_layers;
        f.text.heads = self.heads;
        f.text.mlp_dim = self.mlp_dim;
        f.text.proj_dim = self.proj_dim;
        f.text.max_tokens = self.max_tokens;
        f
    }

    pub fn pretrain(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            corpus_size: self.corpus,
            max_epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            weight_decay: self.weight_decay,
            target_accuracy: self.target_accuracy,
            seed,
            ..PretrainConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSection {
    pub prognosis_cases: usize,
    pub segmentation_cases: usize,
    /// Chest cases scored for the classification report.
    pub chest_eval_cases: usize,
    pub folds: usize,
    pub val_fold: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Segmentation cohort shows part of each lesion only in PET.
    pub complementarity: bool,
    pub censor_prob: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            prognosis_cases: 300,
            segmentation_cases: 96,
            chest_eval_cases: 40,
            folds: 3,
            val_fold: 0,
            radius_min: 4.0,
            radius_max: 8.0,
            complementarity: true,
            censor_prob: 0.3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step1Section {
    pub model: SurvivalModel,
    pub inputs: PrognosisInputs,
    pub bins: usize,
    pub rank: usize,
    pub alpha: f64,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for Step1Section {
    fn default() -> Self {
        Self {
            model: SurvivalModel::DeepHit,
            inputs: PrognosisInputs::ImageText,
            bins: 8,
            rank: 4,
            alpha: 8.0,
            hidden: 32,
            epochs: 50,
            batch_size: 16,
            lr: 3e-4,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step2Section {
    /// Cubic input resolution of the segmentation cohort.
    pub resolution: usize,
    pub patch: usize,
    pub rank: usize,
    pub alpha: f64,
    pub decoder_init_std: f64,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for Step2Section {
    fn default() -> Self {
        Self {
            resolution: 32,
            patch: 8,
            rank: 4,
            alpha: 8.0,
            decoder_init_std: 0.01,
            steps: 2000,
            lr: 1e-3,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step3Section {
    pub rank: usize,
    pub alpha: f64,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for Step3Section {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            hidden: 64,
            steps: 2000,
            lr: 1e-3,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Probe inputs recorded per route for the forgetting audit.
    pub probes: usize,
    /// Write per-epoch CSV series.
    pub curves: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            probes: 16,
            curves: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub base: BaseSection,
    pub data: DataSection,
    pub step1: Option<Step1Section>,
    pub step2: Option<Step2Section>,
    pub step3: Option<Step3Section>,
    pub output: OutputSection,
}

impl Default for RunConfig {
    /// The full three-step sequence at default sizes.
    fn default() -> Self {
        Self {
            base: BaseSection::default(),
            data: DataSection::default(),
            step1: Some(Step1Section::default()),
            step2: Some(Step2Section::default()),
            step3: Some(Step3Section::default()),
            output: OutputSection::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.base
            .foundation()
            .validate()
            .map_err(|e| Error::Config(format!("[base]: {e}")))?;
        let d = &self.data;
        if d.folds < 2 || d.val_fold >= d.folds {
            return bad(format!(
                "need folds >= 2 and val_fold < folds, got {} and {}",
                d.folds, d.val_fold
            ));
        }
        if !(0.0..=1.0).contains(&d.censor_prob)
            || d.radius_min <= 0.0
            || d.radius_max < d.radius_min
        {
            return bad("invalid censoring probability or lesion radii".into());
        }
        if self.output.probes == 0 {
            return bad("output.probes must be positive".into());
        }
        if let Some(s) = &self.step1 {
            if s.bins < 2
                || (s.model == SurvivalModel::Mtlr && s.bins > crate::heads::MAX_MTLR_BINS)
            {
                return bad(format!("step1.bins {} out of range", s.bins));
            }
            if s.epochs == 0 || s.batch_size == 0 || s.hidden == 0 {
                return bad("step1 epochs, batch_size and hidden must be positive".into());
            }
        }
        if let Some(s) = &self.step2 {
            if s.patch == 0 || s.resolution % s.patch != 0 {
                return bad(format!(
                    "step2.resolution {} not divisible by step2.patch {}",
                    s.resolution, s.patch
                ));
            }
            let half = s.resolution as f64 / 2.0;
            if d.radius_max + 1.0 > half {
                return bad(format!(
                    "data.radius_max {} does not fit resolution {}",
                    d.radius_max, s.resolution
                ));
            }
            if s.steps == 0 {
                return bad("step2.steps must be positive".into());
            }
        }
        if let Some(s) = &self.step3 {
            if self.step2.is_none() {
                return bad("step3 is initialised from step2 and needs a [step2] section".into());
            }
            if s.steps == 0 || s.hidden == 0 {
                return bad("step3 steps and hidden must be positive".into());
            }
        }
        if self.step1.is_some() && d.radius_max + 1.0 > self.base.volume as f64 / 2.0 {
            return bad(format!(
                "data.radius_max {} does not fit base volume {}",
                d.radius_max, self.base.volume
            ));
        }
        Ok(())
    }
}

/// Entries of one section; typed reads consume them, leftovers are unknown.
struct Section {
    name: String,
    entries: BTreeMap<String, String>,
}

impl Section {
    fn set<T: FromStr>(&mut self, key: &str, target: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.entries.remove(key) {
            *target = v
                .parse()
                .map_err(|e| Error::Config(format!("{}.{key} = {v:?}: {e}", self.name)))?;
        }
        Ok(())
    }

    fn set_opt<T: FromStr>(&mut self, key: &str, target: &mut Option<T>) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.entries.get(key).cloned() {
            let mut t = v
                .parse()
                .map_err(|e: T::Err| Error::Config(format!("{}.{key} = {v:?}: {e}", self.name)))?;
            self.set(key, &mut t)?;
            *target = Some(t);
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            Some(k) => Err(Error::Config(format!("unknown key {}.{k}", self.name))),
            None => Ok(()),
        }
    }
}

const SECTIONS: [&str; 6] = ["base", "data", "step1", "step2", "step3", "output"];

/// Parses config text, then applies `section.key=value` overrides; an
/// override may introduce a section.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let mut raw: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (section, props) in ini.iter() {
        let Some(section) = section else {
            if let Some((k, _)) = props.iter().next() {
                return Err(Error::Config(format!(
                    "key {k:?} appears before any [section] header"
                )));
            }
            continue;
        };
        let entries = raw.entry(section.to_string()).or_default();
        for (k, v) in props.iter() {
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {section}.{k}")));
            }
        }
    }
    for o in overrides {
        let (path, value) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not section.key=value")))?;
        raw.entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.trim().to_string());
    }
    if let Some(s) = raw.keys().find(|s| !SECTIONS.contains(&s.as_str())) {
        return Err(Error::Config(format!(
            "unknown section [{s}]; expected one of {SECTIONS:?}"
        )));
    }
    let mut take = |name: &str| {
        raw.remove(name).map(|entries| Section {
            name: name.to_string(),
            entries,
        })
    };

    let mut cfg = RunConfig {
        step1: None,
        step2: None,
        step3: None,
        ..RunConfig::default()
    };
    if let Some(mut s) = take("base") {
        let b = &mut cfg.base;
        s.set_opt("checkpoint", &mut b.checkpoint)?;
        s.set("volume", &mut b.volume)?;
        s.set("patch", &mut b.patch)?;
        s.set("embed_dim", &mut b.embed_dim)?;
        s.set("layers", &mut b.layers)?;
        s.set("heads", &mut b.heads)?;
        s.set("mlp_dim", &mut b.mlp_dim)?;
        s.set("proj_dim", &mut b.proj_dim)?;
        s.set("text_layers", &mut b.text_layers)?;
        s.set("max_tokens", &mut b.max_tokens)?;
        s.set("corpus", &mut b.corpus)?;
        s.set("epochs", &mut b.epochs)?;
        s.set("batch_size", &mut b.batch_size)?;
        s.set("lr", &mut b.lr)?;
        s.set("weight_decay", &mut b.weight_decay)?;
        s.set("target_accuracy", &mut b.target_accuracy)?;
        s.finish()?;
    }
    if let Some(mut s) = take("data") {
        let d = &mut cfg.data;
        s.set("prognosis_cases", &mut d.prognosis_cases)?;
        s.set("segmentation_cases", &mut d.segmentation_cases)?;
        s.set("chest_eval_cases", &mut d.chest_eval_cases)?;
        s.set("folds", &mut d.folds)?;
        s.set("val_fold", &mut d.val_fold)?;
        s.set("radius_min", &mut d.radius_min)?;
        s.set("radius_max", &mut d.radius_max)?;
        s.set("complementarity", &mut d.complementarity)?;
        s.set("censor_prob", &mut d.censor_prob)?;
        s.finish()?;
    }
    if let Some(mut s) = take("step1") {
        let mut p = Step1Section::default();
        let mut model = String::from("deephit");
        s.set("model", &mut model)?;
        p.model = match model.as_str() {
            "deephit" => SurvivalModel::DeepHit,
            "mtlr" => SurvivalModel::Mtlr,
            other => {
                return Err(Error::Config(format!(
                    "step1.model {other:?}: expected deephit or mtlr"
                )))
            }
        };
        s.set("inputs", &mut p.inputs)?;
        s.set("bins", &mut p.bins)?;
        s.set("rank", &mut p.rank)?;
        s.set("alpha", &mut p.alpha)?;
        s.set("hidden", &mut p.hidden)?;
        s.set("epochs", &mut p.epochs)?;
        s.set("batch_size", &mut p.batch_size)?;
        s.set("lr", &mut p.lr)?;
        s.set("weight_decay", &mut p.weight_decay)?;
        s.finish()?;
        cfg.step1 = Some(p);
    }
    if let Some(mut s) = take("step2") {
        let mut p = Step2Section::default();
        s.set("resolution", &mut p.resolution)?;
        s.set("patch", &mut p.patch)?;
        s.set("rank", &mut p.rank)?;
        s.set("alpha", &mut p.alpha)?;
        s.set("decoder_init_std", &mut p.decoder_init_std)?;
        s.set("steps", &mut p.steps)?;
        s.set("lr", &mut p.lr)?;
        s.set("weight_decay", &mut p.weight_decay)?;
        s.finish()?;
        cfg.step2 = Some(p);
    }
    if let Some(mut s) = take("step3") {
        let mut p = Step3Section::default();
        s.set("rank", &mut p.rank)?;
        s.set("alpha", &mut p.alpha)?;
        s.set("hidden", &mut p.hidden)?;
        s.set("steps", &mut p.steps)?;
        s.set("lr", &mut p.lr)?;
        s.set("weight_decay", &mut p.weight_decay)?;
        s.finish()?;
        cfg.step3 = Some(p);
    }
    if let Some(mut s) = take("output") {
        let o = &mut cfg.output;
        s.set_opt("dir", &mut o.dir)?;
        s.set("probes", &mut o.probes)?;
        s.set("curves", &mut o.curves)?;
        s.finish()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_default_file_spells_out_the_defaults() {
        let text = include_str!("../../../../configs/default.cfg");
        assert_eq!(
            parse_config(text, &[]).unwrap(),
            parse_config("[step1]\n[step2]\n[step3]\n", &[]).unwrap()
        );
    }

    const TOY: &str = "
; comment
[base]
volume = 16
embed_dim = 32

[data]
prognosis_cases = 60
radius_max = 6

[step1]
model = mtlr
bins = 4

[step2]
resolution = 16
steps = 10
";

    #[test]
    fn present_sections_enable_steps() {
        let c = parse_config(TOY, &[]).unwrap();
        assert_eq!(c.base.volume, 16);
        assert_eq!(c.base.embed_dim, 32);
        assert_eq!(c.data.prognosis_cases, 60);
        assert_eq!(c.step1.as_ref().unwrap().model, SurvivalModel::Mtlr);
        assert_eq!(c.step2.as_ref().unwrap().steps, 10);
        assert!(c.step3.is_none());
        assert_eq!(c.base.heads, BaseSection::default().heads);
    }

    #[test]
    fn overrides_apply_and_may_add_sections() {
        let c = parse_config(TOY, &["step2.steps=7".into(), "step3.steps = 5".into()]).unwrap();
        assert_eq!(c.step2.unwrap().steps, 7);
        assert_eq!(c.step3.unwrap().steps, 5);
    }

    #[test]
    fn unknown_or_malformed_entries_are_errors() {
        for text in [
            "[base]\nvolumes = 16\n",
            "[step4]\nsteps = 1\n",
            "volume = 16\n",
            "[step1]\nbins = many\n",
            "[step1]\nmodel = cox\n",
            "[step3]\nsteps = 5\n",
            "[base]\nvolume = 20\n",
            "[data]\nfolds = 3\nval_fold = 3\n",
        ] {
            assert!(
                matches!(parse_config(text, &[]), Err(Error::Config(_))),
                "{text:?}"
            );
        }
        assert!(parse_config("", &["step1".into()]).is_err());
    }

    #[test]
    fn empty_text_is_base_only() {
        let c = parse_config("", &[]).unwrap();
        assert!(c.step1.is_none() && c.step2.is_none() && c.step3.is_none());
    }
}

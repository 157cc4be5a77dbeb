use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};

use super::generate::{GenParams, SyntheticCase};

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseDescriptor {
    pub id: String,
    pub class_label: bool,
    pub time: f64,
    pub event: bool,
    pub fold: Option<usize>,
}

pub fn case_to_container(c: &SyntheticCase) -> Container {
    let mut out = Container::new()
        .with_meta("kind", "case")
        .with_meta("id", c.id.clone())
        .with_meta("report", c.report.clone())
        .with_meta("time", format!("{:?}", c.time))
        .with_meta("event", c.event.to_string())
        .with_meta("class_label", c.class_label.to_string())
        .with_meta("seed", format!("{},{}", c.seed.0, c.seed.1));
    if let Some(l) = &c.lesion {
        out = out.with_meta("lesion", serde_json::to_string(l).expect("plain struct"));
    }
    for (n, t) in [
        ("ct", &c.ct),
        ("pet", &c.pet),
        ("mask", &c.mask),
        ("ct_visible", &c.ct_visible),
    ] {
        out.arrays.insert(n.to_string(), t.clone());
    }
    out
}

pub fn case_from_container(mut c: Container) -> Result<SyntheticCase> {
    let parse_err = |what: &str| Error::Format {
        offset: 0,
        reason: format!("case field {what} is malformed"),
    };
    let seed = c.meta("seed")?.to_string();
    let (a, b) = seed.split_once(',').ok_or_else(|| parse_err("seed"))?;
    let lesion = match c.meta.get("lesion") {
        Some(s) => Some(serde_json::from_str(s)?),
        None => None,
    };
    let mut take = |n: &str| c.arrays.remove(n).ok_or_else(|| parse_err(n));
    let (ct, pet, mask, ct_visible) = (
        take("ct")?,
        take("pet")?,
        take("mask")?,
        take("ct_visible")?,
    );
    Ok(SyntheticCase {
        id: c.meta("id")?.to_string(),
        seed: (
            a.parse().map_err(|_| parse_err("seed"))?,
            b.parse().map_err(|_| parse_err("seed"))?,
        ),
        ct,
        pet,
        mask,
        ct_visible,
        report: c.meta("report")?.to_string(),
        time: c.meta("time")?.parse().map_err(|_| parse_err("time"))?,
        event: c.meta("event")?.parse().map_err(|_| parse_err("event"))?,
        class_label: c
            .meta("class_label")?
            .parse()
            .map_err(|_| parse_err("class_label"))?,
        lesion,
    })
}

/// Writes `cases/<id>.bin`, `index.jsonl` and `spec.txt` under `dir`.
pub fn write_dataset(
    dir: &Path,
    cases: &[SyntheticCase],
    folds: Option<&[usize]>,
    params: &GenParams,
    master_seed: u64,
) -> Result<()> {
    fs::create_dir_all(dir.join("cases")).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, c) in cases.iter().enumerate() {
        case_to_container(c).write(&dir.join("cases").join(format!("{}.bin", c.id)))?;
        let d = CaseDescriptor {
            id: c.id.clone(),
            class_label: c.class_label,
            time: c.time,
            event: c.event,
            fold: folds.map(|f| f[i]),
        };
        index.push_str(&serde_json::to_string(&d)?);
        index.push('\n');
    }
    let path = dir.join("index.jsonl");
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("spec.txt");
    fs::write(&path, spec_text(params, master_seed, cases.len())?).map_err(|e| Error::io(&path, e))
}

/// `key = value` lines describing how the dataset was generated.
pub fn spec_text(p: &GenParams, master_seed: u64, n: usize) -> Result<String> {
    let mut out = format!("master_seed = {master_seed}\ncases = {n}\n");
    let v = serde_json::to_value(p)?;
    for (k, val) in v.as_object().expect("struct") {
        let text = match val {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Array(a) => a
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        out.push_str(&format!("{k} = {text}\n"));
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<(Vec<SyntheticCase>, Vec<CaseDescriptor>)> {
    let path = dir.join("index.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut cases = Vec::new();
    let mut index = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let d: CaseDescriptor = serde_json::from_str(line)?;
        cases.push(case_from_container(Container::read(
            &dir.join("cases").join(format!("{}.bin", d.id)),
        )?)?);
        index.push(d);
    }
    Ok((cases, index))
}

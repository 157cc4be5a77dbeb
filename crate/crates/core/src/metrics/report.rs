use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One metric observation; serialised as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub step: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub n: usize,
    pub fold: Option<usize>,
}

impl EvalReport {
    pub fn to_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Appends reports to a JSON-lines file, creating it if needed.
pub fn write_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in reports {
        writeln!(f, "{}", r.to_line()?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let r = EvalReport {
            step: 1,
            task: "prognosis".into(),
            metric: "c_index".into(),
            value: 0.75,
            n: 100,
            fold: None,
        };
        assert_eq!(
            r.to_line().unwrap(),
            r#"{"step":1,"task":"prognosis","metric":"c_index","value":0.75,"n":100,"fold":null}"#
        );
    }

    #[test]
    fn append_and_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.jsonl");
        let r = EvalReport {
            step: 2,
            task: "segmentation".into(),
            metric: "dice".into(),
            value: 0.5,
            n: 10,
            fold: Some(1),
        };
        write_reports(&path, std::slice::from_ref(&r)).unwrap();
        write_reports(&path, std::slice::from_ref(&r)).unwrap();
        assert_eq!(read_reports(&path).unwrap(), vec![r.clone(), r]);
    }
}

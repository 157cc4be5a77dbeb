use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ct,
    Pet,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Ct, Modality::Pet, Modality::Text];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Ct => "ct",
            Modality::Pet => "pet",
            Modality::Text => "text",
        }
    }

    fn bit(self) -> u8 {
        match self {
            Modality::Ct => 1,
            Modality::Pet => 2,
            Modality::Text => 4,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}

/// Non-empty subset of `{CT, PET, TEXT}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub fn new(mods: &[Modality]) -> Result<Self> {
        let bits = mods.iter().fold(0, |acc, m| acc | m.bit());
        if bits == 0 {
            return Err(Error::Contract(
                "a modality set needs at least one modality".into(),
            ));
        }
        Ok(Self(bits))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.iter().map(Modality::as_str).collect();
        f.write_str(&parts.join("+"))
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mods = s
            .split('+')
            .map(str::parse)
            .collect::<Result<Vec<Modality>>>()?;
        Self::new(&mods)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Prognosis,
    Segmentation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Prognosis => "prognosis",
            Task::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Task::Classification, Task::Prognosis, Task::Segmentation]
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// `(task, modality set)`; displayed as `task/mod+mod`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RoutingKey {
    pub task: Task,
    pub modalities: ModalitySet,
}

impl RoutingKey {
    pub fn new(task: Task, mods: &[Modality]) -> Result<Self> {
        Ok(Self {
            task,
            modalities: ModalitySet::new(mods)?,
        })
    }

    pub fn classification() -> Self {
        Self::new(Task::Classification, &[Modality::Ct]).expect("non-empty")
    }

    pub fn prognosis() -> Self {
        Self::new(Task::Prognosis, &[Modality::Ct, Modality::Text]).expect("non-empty")
    }

    pub fn seg_ct() -> Self {
        Self::new(Task::Segmentation, &[Modality::Ct]).expect("non-empty")
    }

    pub fn seg_ctpet() -> Self {
        Self::new(Task::Segmentation, &[Modality::Ct, Modality::Pet]).expect("non-empty")
    }

    /// Short capability label: `Cls`, `Prog`, `Seg(C)`, `Seg(CP)`.
    pub fn label(&self) -> String {
        match self.task {
            Task::Classification => "Cls".into(),
            Task::Prognosis => "Prog".into(),
            Task::Segmentation => {
                let letters: String = self
                    .modalities
                    .iter()
                    .map(|m| match m {
                        Modality::Ct => 'C',
                        Modality::Pet => 'P',
                        Modality::Text => 'T',
                    })
                    .collect();
                format!("Seg({letters})")
            }
        }
    }
}

impl fmt::Display for RoutingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.task, self.modalities)
    }
}

impl FromStr for RoutingKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (t, m) = s.split_once('/').ok_or_else(|| {
            Error::Config(format!("routing key {s:?} must look like task/mod+mod"))
        })?;
        Ok(Self {
            task: t.parse()?,
            modalities: m.parse()?,
        })
    }
}

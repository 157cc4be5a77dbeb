use std::path::Path;

use crate::adapters::{
    adapters_from_container, adapters_to_container, AdapterComposition, Modality, RoutingKey,
};
use crate::autodiff::Tensor;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::foundation::FrozenFoundation;
use crate::metrics::ProbeSnapshot;
use crate::tasks::CaseInput;

pub fn save_base(path: &Path, model: &FrozenFoundation) -> Result<()> {
    model.to_container()?.write(path)
}

/// Loads a frozen model and checks its arrays against the recorded hash.
pub fn load_base(path: &Path) -> Result<FrozenFoundation> {
    FrozenFoundation::from_container(Container::read(path)?)
}

pub fn save_adapters(path: &Path, comps: &[&AdapterComposition], base_hash: &str) -> Result<()> {
    adapters_to_container(comps.iter().copied(), base_hash)?.write(path)
}

/// Loads compositions, refusing any trained against a different base.
pub fn load_adapters(path: &Path, base_hash: &str) -> Result<Vec<AdapterComposition>> {
    adapters_from_container(Container::read(path)?, base_hash)
}

/// Probe inputs of one route with the outputs recorded for them.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeSet {
    pub key: RoutingKey,
    pub step: usize,
    pub inputs: Vec<CaseInput>,
    pub outputs: Vec<Tensor>,
}

impl ProbeSet {
    pub fn snapshot(&self) -> ProbeSnapshot {
        ProbeSnapshot {
            key: self.key,
            step: self.step,
            outputs: self.outputs.clone(),
        }
    }

    /// Stores the CT volume, the report ids, and PET only for routes that
    /// read it. Masks are not stored.
    pub fn to_container(&self, base_hash: &str) -> Result<Container> {
        if self.inputs.len() != self.outputs.len() {
            return Err(Error::Contract(
                "probe inputs and outputs differ in count".into(),
            ));
        }
        let mut c = Container::new()
            .with_meta("kind", "probes")
            .with_meta("key", self.key.to_string())
            .with_meta("step", self.step.to_string())
            .with_meta("count", self.inputs.len().to_string())
            .with_meta("base_hash", base_hash);
        let with_pet = self.key.modalities.contains(Modality::Pet);
        for (i, (x, y)) in self.inputs.iter().zip(&self.outputs).enumerate() {
            c.arrays.insert(format!("input/{i:03}/ct"), x.ct.clone());
            if with_pet {
                c.arrays.insert(format!("input/{i:03}/pet"), x.pet.clone());
            }
            let ids = x.text.iter().map(|&t| t as f64).collect();
            c.arrays.insert(
                format!("input/{i:03}/text"),
                Tensor::new(&[x.text.len()], ids)?,
            );
            c.arrays.insert(format!("output/{i:03}"), y.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, base_hash: &str) -> Result<Self> {
        if c.meta("kind")? != "probes" {
            return Err(Error::Format {
                offset: 0,
                reason: "container does not hold probes".into(),
            });
        }
        let recorded = c.meta("base_hash")?;
        if recorded != base_hash {
            return Err(Error::HashMismatch {
                expected: recorded.to_string(),
                found: base_hash.to_string(),
            });
        }
        let key: RoutingKey = c.meta("key")?.parse()?;
        let parse = |k: &str| -> Result<usize> {
            c.meta(k)?.parse().map_err(|_| Error::Format {
                offset: 0,
                reason: format!("meta field {k:?} is not an integer"),
            })
        };
        let (step, count) = (parse("step")?, parse("count")?);
        let mut inputs = Vec::with_capacity(count);
        let mut outputs = Vec::with_capacity(count);
        for i in 0..count {
            let ct = c.array(&format!("input/{i:03}/ct"))?.clone();
            let pet = match c.arrays.get(&format!("input/{i:03}/pet")) {
                Some(p) => p.clone(),
                None => Tensor::zeros(ct.shape()),
            };
            let text = c
                .array(&format!("input/{i:03}/text"))?
                .data()
                .iter()
                .map(|&v| v as usize)
                .collect();
            inputs.push(CaseInput {
                mask: Tensor::zeros(ct.shape()),
                ct,
                pet,
                text,
            });
            outputs.push(c.array(&format!("output/{i:03}"))?.clone());
        }
        Ok(Self {
            key,
            step,
            inputs,
            outputs,
        })
    }

    pub fn write(&self, path: &Path, base_hash: &str) -> Result<()> {
        self.to_container(base_hash)?.write(path)
    }

    pub fn read(path: &Path, base_hash: &str) -> Result<Self> {
        Self::from_container(&Container::read(path)?, base_hash)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn input(rng: &mut ChaCha8Rng) -> CaseInput {
        CaseInput {
            ct: Tensor::randn(&[4, 4, 4], 1.0, rng),
            pet: Tensor::randn(&[4, 4, 4], 1.0, rng),
            text: vec![2, 5, 9, 0],
            mask: Tensor::zeros(&[4, 4, 4]),
        }
    }

    #[test]
    fn probe_round_trip_keeps_what_the_route_reads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for key in [RoutingKey::seg_ct(), RoutingKey::seg_ctpet()] {
            let set = ProbeSet {
                key,
                step: 2,
                inputs: vec![input(&mut rng), input(&mut rng)],
                outputs: vec![
                    Tensor::randn(&[3], 1.0, &mut rng),
                    Tensor::randn(&[3], 1.0, &mut rng),
                ],
            };
            let back = ProbeSet::from_container(&set.to_container("h").unwrap(), "h").unwrap();
            assert_eq!(back.outputs, set.outputs);
            for (a, b) in back.inputs.iter().zip(&set.inputs) {
                assert_eq!(a.ct, b.ct);
                assert_eq!(a.text, b.text);
                assert_eq!(a.pet == b.pet, key == RoutingKey::seg_ctpet());
            }
            assert!(matches!(
                ProbeSet::from_container(&set.to_container("h").unwrap(), "other"),
                Err(Error::HashMismatch { .. })
            ));
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = FrozenFoundation::init(Default::default(), 3).unwrap();
        model.freeze();
        let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        save_base(&a, &model).unwrap();
        save_base(&b, &load_base(&a).unwrap()).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let mut bytes = std::fs::read(&a).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&a, bytes).unwrap();
        assert!(matches!(load_base(&a), Err(Error::Integrity(_))));
    }
}

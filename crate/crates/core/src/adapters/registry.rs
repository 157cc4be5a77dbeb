use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::foundation::{EncoderHooks, FrozenFoundation, LoraHook};
use crate::params::{Binder, Parameters};

use super::decoder::DecoderAdapter;
use super::fusion::FusionAdapter;
use super::lora::{make_lora_modules, LoraModule};
use super::mlp::MlpAdapter;
use super::reembed::ResolutionReembed;
use super::routing::{Modality, RoutingKey};

#[derive(Clone, Debug, PartialEq)]
pub enum AdapterModule {
    Lora(LoraModule),
    Mlp(MlpAdapter),
    Fusion(FusionAdapter),
    Decoder(DecoderAdapter),
    Reembed(ResolutionReembed),
}

/// Non-array description of a module, stored next to its arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModuleSpec {
    Lora {
        target: String,
        rank: usize,
        alpha: f64,
    },
    Mlp {
        residual: bool,
    },
    Fusion {
        modalities: Vec<Modality>,
    },
    Decoder {
        patch: usize,
        shape: [usize; 3],
    },
    Reembed {
        patch: usize,
        shape: [usize; 3],
    },
}

impl AdapterModule {
    pub fn spec(&self) -> ModuleSpec {
        match self {
            AdapterModule::Lora(l) => ModuleSpec::Lora {
                target: l.target.clone(),
                rank: l.rank,
                alpha: l.alpha,
            },
            AdapterModule::Mlp(m) => ModuleSpec::Mlp {
                residual: m.residual,
            },
            AdapterModule::Fusion(f) => ModuleSpec::Fusion {
                modalities: f.modalities.clone(),
            },
            AdapterModule::Decoder(d) => ModuleSpec::Decoder {
                patch: d.patch,
                shape: d.shape,
            },
            AdapterModule::Reembed(r) => ModuleSpec::Reembed {
                patch: r.patch,
                shape: r.shape,
            },
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            AdapterModule::Lora(l) => {
                f("down".into(), &l.down);
                f("up".into(), &l.up);
            }
            AdapterModule::Mlp(m) => m.arrays().into_iter().for_each(|(n, t)| f(n.into(), t)),
            AdapterModule::Fusion(fu) => fu.visit(f),
            AdapterModule::Decoder(d) => {
                f("w".into(), &d.w);
                f("b".into(), &d.b);
            }
            AdapterModule::Reembed(r) => {
                f("w".into(), &r.w);
                f("b".into(), &r.b);
                f("pos".into(), &r.pos);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            AdapterModule::Lora(l) => {
                f("down".into(), &mut l.down);
                f("up".into(), &mut l.up);
            }
            AdapterModule::Mlp(m) => m.arrays_mut().into_iter().for_each(|(n, t)| f(n.into(), t)),
            AdapterModule::Fusion(fu) => fu.visit_mut(f),
            AdapterModule::Decoder(d) => {
                f("w".into(), &mut d.w);
                f("b".into(), &mut d.b);
            }
            AdapterModule::Reembed(r) => {
                f("w".into(), &mut r.w);
                f("b".into(), &mut r.b);
                f("pos".into(), &mut r.pos);
            }
        }
    }

    /// Rebuilds a module from its spec and arrays keyed by local name.
    pub fn from_parts(spec: &ModuleSpec, arrays: &mut BTreeMap<String, Tensor>) -> Result<Self> {
        let mut take = |n: &str| {
            arrays.remove(n).ok_or_else(|| {
                Error::Composition(format!("checkpoint lacks array {n:?} for {spec:?}"))
            })
        };
        Ok(match spec {
            ModuleSpec::Lora {
                target,
                rank,
                alpha,
            } => AdapterModule::Lora(LoraModule {
                target: target.clone(),
                rank: *rank,
                alpha: *alpha,
                down: take("down")?,
                up: take("up")?,
            }),
            ModuleSpec::Mlp { residual } => AdapterModule::Mlp(MlpAdapter {
                w1: take("w1")?,
                b1: take("b1")?,
                w2: take("w2")?,
                b2: take("b2")?,
                residual: *residual,
            }),
            ModuleSpec::Fusion { modalities } => {
                let proj = modalities
                    .iter()
                    .map(|m| take(&FusionAdapter::proj_name(*m)))
                    .collect::<Result<Vec<_>>>()?;
                AdapterModule::Fusion(FusionAdapter {
                    modalities: modalities.clone(),
                    proj,
                    joint_w: take("joint_w")?,
                    joint_b: take("joint_b")?,
                    mlp: MlpAdapter {
                        w1: take("mlp_w1")?,
                        b1: take("mlp_b1")?,
                        w2: take("mlp_w2")?,
                        b2: take("mlp_b2")?,
                        residual: true,
                    },
                })
            }
            ModuleSpec::Decoder { patch, shape } => AdapterModule::Decoder(DecoderAdapter {
                patch: *patch,
                shape: *shape,
                w: take("w")?,
                b: take("b")?,
            }),
            ModuleSpec::Reembed { patch, shape } => AdapterModule::Reembed(ResolutionReembed {
                patch: *patch,
                shape: *shape,
                w: take("w")?,
                b: take("b")?,
                pos: take("pos")?,
            }),
        })
    }
}

/// Ordered, named adapter modules serving one routing key. Every array is
/// owned by exactly this composition.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterComposition {
    pub key: RoutingKey,
    modules: Vec<(String, AdapterModule)>,
}

impl AdapterComposition {
    pub fn new(key: RoutingKey) -> Self {
        Self {
            key,
            modules: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, module: AdapterModule) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.contains(['/', ' ']) {
            return Err(Error::Composition(format!("invalid module name {name:?}")));
        }
        if self.get(&name).is_some() {
            return Err(Error::Composition(format!(
                "module {name:?} already present in {}",
                self.key
            )));
        }
        self.modules.push((name, module));
        Ok(())
    }

    pub fn modules(&self) -> impl Iterator<Item = (&str, &AdapterModule)> {
        self.modules.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn get(&self, name: &str) -> Option<&AdapterModule> {
        self.modules.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn mlp(&self, name: &str) -> Result<&MlpAdapter> {
        match self.get(name) {
            Some(AdapterModule::Mlp(m)) => Ok(m),
            _ => Err(self.missing(name, "MLP")),
        }
    }

    pub fn fusion(&self, name: &str) -> Result<&FusionAdapter> {
        match self.get(name) {
            Some(AdapterModule::Fusion(f)) => Ok(f),
            _ => Err(self.missing(name, "fusion")),
        }
    }

    pub fn decoder(&self, name: &str) -> Result<&DecoderAdapter> {
        match self.get(name) {
            Some(AdapterModule::Decoder(d)) => Ok(d),
            _ => Err(self.missing(name, "decoder")),
        }
    }

    pub fn reembed(&self, name: &str) -> Option<&ResolutionReembed> {
        match self.get(name) {
            Some(AdapterModule::Reembed(r)) => Some(r),
            _ => None,
        }
    }

    fn missing(&self, name: &str, kind: &str) -> Error {
        Error::Composition(format!("{} has no {kind} module named {name:?}", self.key))
    }

    /// Adds one LoRA module per target under `<path>.lora.<block>.<proj>`.
    pub fn attach_lora<R: Rng + ?Sized>(
        &mut self,
        model: &FrozenFoundation,
        path: &str,
        targets: &[String],
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Result<()> {
        for m in make_lora_modules(model, targets, rank, alpha, rng)? {
            let local = m
                .target
                .split_once('/')
                .map_or(m.target.as_str(), |(_, rest)| rest);
            let name = format!("{path}.lora.{}", local.replace('/', "."));
            self.push(name, AdapterModule::Lora(m))?;
        }
        Ok(())
    }

    /// Binds the encoder-side modules of one input path (`ct`, `pet`,
    /// `text`): its re-embedding and its LoRA modules.
    pub fn encoder_hooks(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        path: &str,
    ) -> Result<EncoderHooks> {
        let mut hooks = EncoderHooks::default();
        let reembed_name = format!("{path}.reembed");
        if let Some(r) = self.reembed(&reembed_name) {
            hooks.embed = Some(r.hook(tape, binder, &reembed_name)?);
        }
        let prefix = format!("{path}.lora.");
        for (name, m) in self.modules() {
            if let (true, AdapterModule::Lora(l)) = (name.starts_with(&prefix), m) {
                let a = binder.bind(tape, &format!("{name}/down"), &l.down)?;
                let b = binder.bind(tape, &format!("{name}/up"), &l.up)?;
                hooks.lora.insert(
                    l.target.clone(),
                    LoraHook {
                        a,
                        b,
                        scale: l.scale(),
                    },
                );
            }
        }
        Ok(hooks)
    }

    /// Checks every module against the frozen model it will run on.
    pub fn validate(&self, model: &FrozenFoundation) -> Result<()> {
        let cfg = model.config();
        for (name, m) in self.modules() {
            let bad = |why: String| {
                Err(Error::Composition(format!(
                    "{}: module {name:?} {why}",
                    self.key
                )))
            };
            match m {
                AdapterModule::Lora(l) => {
                    let w = model
                        .params()
                        .get(&format!("{}/w", l.target))
                        .map_err(|_| {
                            Error::Composition(format!(
                                "{}: module {name:?} targets unknown weight {:?}",
                                self.key, l.target
                            ))
                        })?;
                    if l.down.shape() != [w.shape()[0], l.rank]
                        || l.up.shape() != [l.rank, w.shape()[1]]
                    {
                        return bad(format!("has factors incompatible with {:?}", w.shape()));
                    }
                }
                AdapterModule::Reembed(r) => {
                    if r.w.shape() != [r.patch.pow(3), cfg.vision.embed_dim] {
                        return bad("has a patch matrix of the wrong shape".into());
                    }
                }
                AdapterModule::Decoder(d) => {
                    if d.embed_dim() != cfg.vision.embed_dim {
                        return bad("expects a different token width".into());
                    }
                }
                AdapterModule::Mlp(_) | AdapterModule::Fusion(_) => {}
            }
        }
        Ok(())
    }

    /// Names of the stored arrays, `adapter/<task>/<mods>/<module>/<array>`.
    pub fn checkpoint_prefix(&self) -> String {
        format!("adapter/{}", self.key)
    }
}

impl Parameters for AdapterComposition {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (name, m) in &self.modules {
            m.visit(&mut |local, t| f(&format!("{name}/{local}"), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (name, m) in self.modules.iter_mut() {
            m.visit_mut(&mut |local, t| f(&format!("{name}/{local}"), t));
        }
    }
}

/// Routing table from `(task, modalities)` to a composition.
#[derive(Clone, Debug, Default)]
pub struct AdapterRegistry {
    entries: BTreeMap<RoutingKey, Arc<AdapterComposition>>,
}

impl AdapterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry of an unadapted base: only classification, with no modules.
    pub fn base() -> Self {
        let mut r = Self::new();
        r.register(
            RoutingKey::classification(),
            AdapterComposition::new(RoutingKey::classification()),
        )
        .expect("empty registry");
        r
    }

    pub fn register(
        &mut self,
        key: RoutingKey,
        composition: AdapterComposition,
    ) -> Result<Arc<AdapterComposition>> {
        if composition.key != key {
            return Err(Error::Composition(format!(
                "composition built for {} registered under {key}",
                composition.key
            )));
        }
        if self.entries.contains_key(&key) {
            return Err(Error::Conflict(key.to_string()));
        }
        let arc = Arc::new(composition);
        self.entries.insert(key, Arc::clone(&arc));
        Ok(arc)
    }

    pub fn route(&self, key: &RoutingKey) -> Result<Arc<AdapterComposition>> {
        self.entries
            .get(key)
            .cloned()
            .ok_or_else(|| Error::Routing {
                key: key.to_string(),
                registered: self.entries.keys().map(ToString::to_string).collect(),
            })
    }

    pub fn keys(&self) -> Vec<RoutingKey> {
        self.entries.keys().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&RoutingKey, &Arc<AdapterComposition>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Packs compositions into one container tied to `base_hash`.
pub fn adapters_to_container<'a>(
    compositions: impl IntoIterator<Item = &'a AdapterComposition>,
    base_hash: &str,
) -> Result<Container> {
    let mut c = Container::new()
        .with_meta("kind", "adapters")
        .with_meta("base_hash", base_hash);
    let mut keys = Vec::new();
    for comp in compositions {
        let prefix = comp.checkpoint_prefix();
        keys.push(comp.key.to_string());
        let order: Vec<&str> = comp.modules().map(|(n, _)| n).collect();
        c.meta
            .insert(format!("order/{}", comp.key), order.join(","));
        for (name, m) in comp.modules() {
            c.meta.insert(
                format!("module/{}/{name}", comp.key),
                serde_json::to_string(&m.spec())?,
            );
            m.visit(&mut |local, t| {
                c.arrays
                    .insert(format!("{prefix}/{name}/{local}"), t.clone());
            });
        }
    }
    c.meta.insert("routes".into(), keys.join(","));
    Ok(c)
}

/// Restores compositions, refusing a container trained against a
/// different base.
pub fn adapters_from_container(
    mut c: Container,
    base_hash: &str,
) -> Result<Vec<AdapterComposition>> {
    if c.meta("kind")? != "adapters" {
        return Err(Error::Format {
            offset: 0,
            reason: "container does not hold adapters".into(),
        });
    }
    let recorded = c.meta("base_hash")?;
    if recorded != base_hash {
        return Err(Error::HashMismatch {
            expected: recorded.to_string(),
            found: base_hash.to_string(),
        });
    }
    let routes = c.meta("routes")?.to_string();
    let mut out = Vec::new();
    for key_text in routes.split(',').filter(|s| !s.is_empty()) {
        let key: RoutingKey = key_text.parse()?;
        let mut comp = AdapterComposition::new(key);
        let prefix = comp.checkpoint_prefix();
        let order = c.meta(&format!("order/{key}"))?.to_string();
        for name in order.split(',').filter(|s| !s.is_empty()) {
            let spec: ModuleSpec = serde_json::from_str(c.meta(&format!("module/{key}/{name}"))?)?;
            let module_prefix = format!("{prefix}/{name}/");
            let names: Vec<String> = c
                .arrays
                .keys()
                .filter(|n| n.starts_with(&module_prefix))
                .cloned()
                .collect();
            let mut local: BTreeMap<String, Tensor> = names
                .into_iter()
                .map(|n| {
                    let t = c.arrays.remove(&n).expect("listed");
                    (n[module_prefix.len()..].to_string(), t)
                })
                .collect();
            let module = AdapterModule::from_parts(&spec, &mut local)?;
            if let Some(extra) = local.keys().next() {
                return Err(Error::Composition(format!(
                    "unexpected array {extra:?} in module {name:?}"
                )));
            }
            comp.push(name, module)?;
        }
        out.push(comp);
    }
    if let Some(extra) = c.arrays.keys().next() {
        return Err(Error::Composition(format!(
            "array {extra:?} belongs to no stored module"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::adapters::fusion::ProjectionInit;
    use crate::adapters::lora::qv_targets;
    use crate::foundation::FoundationConfig;

    fn model() -> FrozenFoundation {
        let mut m = FrozenFoundation::init(FoundationConfig::default(), 1).unwrap();
        m.freeze();
        m
    }

    fn sample(m: &FrozenFoundation) -> AdapterComposition {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = AdapterComposition::new(RoutingKey::prognosis());
        c.attach_lora(m, "text", &qv_targets(m, "text"), 4, 8.0, &mut rng)
            .unwrap();
        c.push(
            "fusion",
            AdapterModule::Fusion(
                FusionAdapter::new(
                    &[
                        (Modality::Ct, 32, ProjectionInit::Zero),
                        (Modality::Text, 32, ProjectionInit::Identity),
                    ],
                    32,
                    16,
                    &mut rng,
                )
                .unwrap(),
            ),
        )
        .unwrap();
        c.push(
            "head",
            AdapterModule::Mlp(MlpAdapter::new(32, 16, 8, false, false, &mut rng).unwrap()),
        )
        .unwrap();
        c
    }

    #[test]
    fn attach_counts_and_parameter_enumeration() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = AdapterComposition::new(RoutingKey::seg_ct());
        let targets = qv_targets(&m, "vision");
        c.attach_lora(&m, "ct", &targets, 4, 8.0, &mut rng).unwrap();
        assert_eq!(c.len(), 8);
        let mut want = 0;
        for t in &targets {
            let w = m.params().get(&format!("{t}/w")).unwrap();
            want += 4 * (w.shape()[0] + w.shape()[1]);
        }
        assert_eq!(c.num_params(), want);
        assert!(c.get("ct.lora.block3.attn_v").is_some());

        let err = c
            .attach_lora(
                &m,
                "ct",
                &["vision/block9/attn_q".to_string()],
                4,
                8.0,
                &mut rng,
            )
            .unwrap_err();
        assert!(
            matches!(err, Error::UnknownWeight { ref valid, .. } if valid.contains(&"vision/block0/attn_q".to_string()))
        );
    }

    #[test]
    fn register_and_route() {
        let m = model();
        let mut reg = AdapterRegistry::base();
        let arc = reg.register(RoutingKey::prognosis(), sample(&m)).unwrap();
        assert!(Arc::ptr_eq(
            &arc,
            &reg.route(&RoutingKey::prognosis()).unwrap()
        ));
        assert!(matches!(
            reg.register(RoutingKey::prognosis(), sample(&m)),
            Err(Error::Conflict(_))
        ));
        match reg.route(&RoutingKey::seg_ct()) {
            Err(Error::Routing { registered, .. }) => {
                assert_eq!(registered, vec!["classification/ct", "prognosis/ct+text"]);
            }
            other => panic!("expected routing error, got {other:?}"),
        }
    }

    #[test]
    fn distinct_keys_hold_distinct_compositions() {
        let mut reg = AdapterRegistry::new();
        reg.register(
            RoutingKey::seg_ct(),
            AdapterComposition::new(RoutingKey::seg_ct()),
        )
        .unwrap();
        reg.register(
            RoutingKey::seg_ctpet(),
            AdapterComposition::new(RoutingKey::seg_ctpet()),
        )
        .unwrap();
        let a = reg.route(&RoutingKey::seg_ct()).unwrap();
        let b = reg.route(&RoutingKey::seg_ctpet()).unwrap();
        assert!(!Arc::ptr_eq(&a, &b));
        assert_ne!(a.key, b.key);
    }

    #[test]
    fn checkpoint_round_trip_and_base_check() {
        let m = model();
        let c = sample(&m);
        let hash = m.base_hash().unwrap();
        let bytes = adapters_to_container([&c], hash)
            .unwrap()
            .to_bytes()
            .unwrap();
        let back = adapters_from_container(Container::from_bytes(&bytes).unwrap(), hash).unwrap();
        assert_eq!(back, vec![c.clone()]);
        assert_eq!(
            adapters_to_container(&back, hash)
                .unwrap()
                .to_bytes()
                .unwrap(),
            bytes
        );
        assert!(c.names().iter().all(|n| !n.contains(' ')));
        let stored = Container::from_bytes(&bytes).unwrap();
        assert!(stored
            .arrays
            .contains_key("adapter/prognosis/ct+text/head/w1"));
        assert!(matches!(
            adapters_from_container(stored, "other"),
            Err(Error::HashMismatch { .. })
        ));
    }
}

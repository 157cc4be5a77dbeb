use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::lora::lora_delta;
use crate::autodiff::{nn, Tape, Tensor, Var};
use crate::container::{payload_digest, Container};
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};

use super::config::{num_patches, FoundationConfig};
use super::patch::patchify;
use super::tokenizer::trim_padding;

const LN_EPS: f64 = 1e-5;

/// Replacement patch and positional embedding for the image path.
#[derive(Clone, Copy, Debug)]
pub struct EmbedHook {
    pub w: Var,
    pub b: Var,
    pub pos: Var,
    pub patch: usize,
}

/// Low-rank delta on one frozen projection.
#[derive(Clone, Copy, Debug)]
pub struct LoraHook {
    pub a: Var,
    pub b: Var,
    pub scale: f64,
}

/// Adapter entry points inside one encoder pass. Keys of `lora` are weight
/// names such as `vision/block0/attn_q`.
#[derive(Clone, Debug, Default)]
pub struct EncoderHooks {
    pub embed: Option<EmbedHook>,
    pub lora: BTreeMap<String, LoraHook>,
}

#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[n × d]` tokens after the final layer norm.
    pub tokens: Var,
    /// `[s]` unit-norm projection of the mean token.
    pub pooled: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedValue {
    pub tokens: Tensor,
    pub pooled: Tensor,
}

/// Dual-encoder foundation model. Once frozen, its arrays are reachable only
/// through shared references and `base_hash` identifies them.
#[derive(Clone, Debug)]
pub struct FrozenFoundation {
    config: FoundationConfig,
    params: ParamStore,
    base_hash: Option<String>,
}

impl FrozenFoundation {
    /// Randomly initialised, not yet frozen.
    pub fn init(config: FoundationConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let v = &config.vision;
        let d = v.embed_dim;
        let pv = v.patch_volume();
        p.insert(
            "vision/patch_embed/w",
            Tensor::randn(&[pv, d], 1.0 / (pv as f64).sqrt(), &mut rng),
        );
        p.insert("vision/patch_embed/b", Tensor::zeros(&[d]));
        p.insert(
            "vision/pos_embed",
            Tensor::randn(&[v.num_patches(), d], 0.1, &mut rng),
        );
        init_blocks(&mut p, "vision", v.layers, d, v.mlp_dim, &mut rng);
        p.insert("vision/ln_f/g", Tensor::ones(&[d]));
        p.insert("vision/ln_f/b", Tensor::zeros(&[d]));
        p.insert(
            "vision/proj/w",
            Tensor::randn(&[d, v.proj_dim], 1.0 / (d as f64).sqrt(), &mut rng),
        );

        let t = &config.text;
        let d = t.embed_dim;
        p.insert(
            "text/token_embed",
            Tensor::randn(&[t.vocab_size, d], 0.5, &mut rng),
        );
        p.insert(
            "text/pos_embed",
            Tensor::randn(&[t.max_tokens, d], 0.1, &mut rng),
        );
        init_blocks(&mut p, "text", t.layers, d, t.mlp_dim, &mut rng);
        p.insert("text/ln_f/g", Tensor::ones(&[d]));
        p.insert("text/ln_f/b", Tensor::zeros(&[d]));
        p.insert(
            "text/proj/w",
            Tensor::randn(&[d, t.proj_dim], 1.0 / (d as f64).sqrt(), &mut rng),
        );
        Ok(Self {
            config,
            params: p,
            base_hash: None,
        })
    }

    pub fn config(&self) -> &FoundationConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable weights, available only before freezing.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.is_frozen() {
            return Err(Error::Ownership("the foundation model is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.base_hash.is_some()
    }

    pub fn freeze(&mut self) {
        self.base_hash = Some(self.compute_hash());
    }

    /// Drops the freeze, returning a model whose weights may be edited.
    pub fn into_unfrozen(mut self) -> Self {
        self.base_hash = None;
        self
    }

    pub fn base_hash(&self) -> Option<&str> {
        self.base_hash.as_deref()
    }

    /// SHA-256 of the checkpoint payload region, recomputed from the arrays.
    pub fn compute_hash(&self) -> String {
        payload_digest(self.params.iter().map(|(_, t)| t))
    }

    /// Weight matrices that LoRA may target: every projection inside the
    /// transformer blocks of both encoders.
    pub fn adaptable_weights(&self) -> Vec<String> {
        self.params
            .iter()
            .filter_map(|(n, _)| n.strip_suffix("/w"))
            .filter(|n| n.contains("/block"))
            .map(str::to_string)
            .collect()
    }

    pub fn to_container(&self) -> Result<Container> {
        let hash = self
            .base_hash
            .as_ref()
            .ok_or_else(|| Error::Contract("only frozen models are checkpointed".into()))?;
        Ok(Container::from_params(&self.params)
            .with_meta("kind", "foundation")
            .with_meta("base_hash", hash.clone())
            .with_meta("config", serde_json::to_string(&self.config)?))
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.meta("kind")? != "foundation" {
            return Err(Error::Format {
                offset: 0,
                reason: "container does not hold a foundation model".into(),
            });
        }
        let config: FoundationConfig = serde_json::from_str(c.meta("config")?)?;
        let recorded = c.meta("base_hash")?.to_string();
        let model = Self {
            config,
            params: c.into_store(),
            base_hash: Some(recorded.clone()),
        };
        let fresh = Self::init(model.config.clone(), 0)?;
        for (n, t) in fresh.params.iter() {
            if model.params.get(n)?.shape() != t.shape() {
                return Err(Error::Format {
                    offset: 0,
                    reason: format!("array {n:?} has the wrong shape for the stored config"),
                });
            }
        }
        let actual = model.compute_hash();
        if actual != recorded {
            return Err(Error::HashMismatch {
                expected: recorded,
                found: actual,
            });
        }
        Ok(model)
    }

    /// Image tower on a tape. Without an embed hook the volume must match the
    /// pre-training resolution.
    pub fn encode_image_on(
        &self,
        tape: &mut Tape,
        base: &mut Binder,
        vol: &Tensor,
        hooks: &EncoderHooks,
    ) -> Result<Encoded> {
        let v = &self.config.vision;
        let x = match hooks.embed {
            Some(e) => embed_volume(tape, vol, e.w, e.b, e.pos, e.patch)?,
            None => {
                let n = num_patches(vol.shape(), v.patch_size)?;
                if n != v.num_patches() {
                    return Err(Error::Resolution {
                        shape: vol.shape().to_vec(),
                        patch: v.patch_size,
                    });
                }
                let w = base.bind_store(tape, &self.params, "vision/patch_embed/w")?;
                let b = base.bind_store(tape, &self.params, "vision/patch_embed/b")?;
                let pos = base.bind_store(tape, &self.params, "vision/pos_embed")?;
                embed_volume(tape, vol, w, b, pos, v.patch_size)?
            }
        };
        self.tower(tape, base, "vision", x, v.layers, v.heads, hooks)
    }

    /// Text tower on a tape; trailing padding is dropped first.
    pub fn encode_text_on(
        &self,
        tape: &mut Tape,
        base: &mut Binder,
        ids: &[usize],
        hooks: &EncoderHooks,
    ) -> Result<Encoded> {
        let t = &self.config.text;
        let ids = trim_padding(ids);
        if ids.len() > t.max_tokens {
            return Err(Error::Contract(format!(
                "{} tokens exceed max_tokens {}",
                ids.len(),
                t.max_tokens
            )));
        }
        let table = base.bind_store(tape, &self.params, "text/token_embed")?;
        let tok = tape.embedding(table, ids)?;
        let pos_all = base.bind_store(tape, &self.params, "text/pos_embed")?;
        let d = t.embed_dim;
        let pos = tape.gather(pos_all, (0..ids.len() * d).collect(), &[ids.len(), d])?;
        let x = tape.add(tok, pos)?;
        self.tower(tape, base, "text", x, t.layers, t.heads, hooks)
    }

    fn tower(
        &self,
        tape: &mut Tape,
        base: &mut Binder,
        prefix: &str,
        mut x: Var,
        layers: usize,
        heads: usize,
        hooks: &EncoderHooks,
    ) -> Result<Encoded> {
        for i in 0..layers {
            x = self.block(tape, base, &format!("{prefix}/block{i}"), x, heads, hooks)?;
        }
        let g = base.bind_store(tape, &self.params, &format!("{prefix}/ln_f/g"))?;
        let b = base.bind_store(tape, &self.params, &format!("{prefix}/ln_f/b"))?;
        let tokens = tape.layer_norm(x, g, b, LN_EPS)?;
        let mean = tape.mean_rows(tokens)?;
        let d = tape.shape(mean)[0];
        let mean = tape.reshape(mean, &[1, d])?;
        let proj = base.bind_store(tape, &self.params, &format!("{prefix}/proj/w"))?;
        let z = tape.matmul(mean, proj)?;
        let z = tape.l2_normalize(z)?;
        let s = tape.shape(z)[1];
        let pooled = tape.reshape(z, &[s])?;
        Ok(Encoded { tokens, pooled })
    }

    /// Pre-norm transformer block.
    fn block(
        &self,
        tape: &mut Tape,
        base: &mut Binder,
        name: &str,
        x: Var,
        heads: usize,
        hooks: &EncoderHooks,
    ) -> Result<Var> {
        let ln1g = base.bind_store(tape, &self.params, &format!("{name}/ln1/g"))?;
        let ln1b = base.bind_store(tape, &self.params, &format!("{name}/ln1/b"))?;
        let h = tape.layer_norm(x, ln1g, ln1b, LN_EPS)?;
        let q = self.projection(tape, base, &format!("{name}/attn_q"), h, hooks)?;
        let k = self.projection(tape, base, &format!("{name}/attn_k"), h, hooks)?;
        let v = self.projection(tape, base, &format!("{name}/attn_v"), h, hooks)?;
        let a = nn::attention(tape, q, k, v, heads)?;
        let a = self.projection(tape, base, &format!("{name}/attn_o"), a, hooks)?;
        let x = tape.add(x, a)?;

        let ln2g = base.bind_store(tape, &self.params, &format!("{name}/ln2/g"))?;
        let ln2b = base.bind_store(tape, &self.params, &format!("{name}/ln2/b"))?;
        let h = tape.layer_norm(x, ln2g, ln2b, LN_EPS)?;
        let h = self.projection(tape, base, &format!("{name}/mlp_in"), h, hooks)?;
        let h = tape.gelu(h)?;
        let h = self.projection(tape, base, &format!("{name}/mlp_out"), h, hooks)?;
        tape.add(x, h)
    }

    /// `x·W (+ LoRA delta) + b`.
    fn projection(
        &self,
        tape: &mut Tape,
        base: &mut Binder,
        name: &str,
        x: Var,
        hooks: &EncoderHooks,
    ) -> Result<Var> {
        let w = base.bind_store(tape, &self.params, &format!("{name}/w"))?;
        let b = base.bind_store(tape, &self.params, &format!("{name}/b"))?;
        let mut y = tape.matmul(x, w)?;
        if let Some(l) = hooks.lora.get(name) {
            let delta = lora_delta(tape, x, l.a, l.b, l.scale)?;
            y = tape.add(y, delta)?;
        }
        tape.add_bias(y, b)
    }

    /// Frozen image encoding with no adapters.
    pub fn encode_image(&self, vol: &Tensor) -> Result<EncodedValue> {
        let mut tape = Tape::new();
        let mut base = Binder::frozen();
        let e = self.encode_image_on(&mut tape, &mut base, vol, &EncoderHooks::default())?;
        Ok(EncodedValue {
            tokens: tape.value(e.tokens).clone(),
            pooled: tape.value(e.pooled).clone(),
        })
    }

    /// Frozen text encoding with no adapters.
    pub fn encode_text(&self, ids: &[usize]) -> Result<EncodedValue> {
        let mut tape = Tape::new();
        let mut base = Binder::frozen();
        let e = self.encode_text_on(&mut tape, &mut base, ids, &EncoderHooks::default())?;
        Ok(EncodedValue {
            tokens: tape.value(e.tokens).clone(),
            pooled: tape.value(e.pooled).clone(),
        })
    }
}

/// Patchify, linearly embed, add positions: `[D×H×W] → [n×d]`.
pub fn embed_volume(
    tape: &mut Tape,
    vol: &Tensor,
    w: Var,
    b: Var,
    pos: Var,
    patch: usize,
) -> Result<Var> {
    let patches = patchify(vol, patch)?;
    let n = patches.shape()[0];
    if tape.shape(pos)[0] != n {
        return Err(Error::Resolution {
            shape: vol.shape().to_vec(),
            patch,
        });
    }
    let pv = tape.constant(&patches)?;
    let e = tape.matmul(pv, w)?;
    let e = tape.add_bias(e, b)?;
    tape.add(e, pos)
}

fn init_blocks(
    p: &mut ParamStore,
    prefix: &str,
    layers: usize,
    d: usize,
    mlp: usize,
    rng: &mut ChaCha8Rng,
) {
    let std_d = 1.0 / (d as f64).sqrt();
    let depth = 1.0 / ((2 * layers) as f64).sqrt();
    for i in 0..layers {
        let n = format!("{prefix}/block{i}");
        for ln in ["ln1", "ln2"] {
            p.insert(format!("{n}/{ln}/g"), Tensor::ones(&[d]));
            p.insert(format!("{n}/{ln}/b"), Tensor::zeros(&[d]));
        }
        for proj in ["attn_q", "attn_k", "attn_v"] {
            p.insert(format!("{n}/{proj}/w"), Tensor::randn(&[d, d], std_d, rng));
            p.insert(format!("{n}/{proj}/b"), Tensor::zeros(&[d]));
        }
        p.insert(
            format!("{n}/attn_o/w"),
            Tensor::randn(&[d, d], std_d * depth, rng),
        );
        p.insert(format!("{n}/attn_o/b"), Tensor::zeros(&[d]));
        p.insert(
            format!("{n}/mlp_in/w"),
            Tensor::randn(&[d, mlp], std_d, rng),
        );
        p.insert(format!("{n}/mlp_in/b"), Tensor::zeros(&[mlp]));
        p.insert(
            format!("{n}/mlp_out/w"),
            Tensor::randn(&[mlp, d], depth / (mlp as f64).sqrt(), rng),
        );
        p.insert(format!("{n}/mlp_out/b"), Tensor::zeros(&[d]));
    }
}

use rand::Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::resample_volume;
use crate::error::Result;
use crate::foundation::{num_patches, EmbedHook, FrozenFoundation};
use crate::params::Binder;

/// Trainable patch and positional embeddings for one input resolution.
/// They replace the frozen embeddings; the transformer blocks stay frozen.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionReembed {
    pub patch: usize,
    pub shape: [usize; 3],
    /// `[p′³ × d]`
    pub w: Tensor,
    /// `[d]`
    pub b: Tensor,
    /// `[n′ × d]`
    pub pos: Tensor,
}

impl ResolutionReembed {
    /// Initialised from the frozen embeddings. When patch size and grid
    /// match the base this is an exact copy; a different grid resamples
    /// the positional table trilinearly; a different patch size draws a
    /// fresh patch matrix.
    pub fn from_base<R: Rng + ?Sized>(
        model: &FrozenFoundation,
        shape: [usize; 3],
        patch: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = num_patches(&shape, patch)?;
        let v = &model.config().vision;
        let d = v.embed_dim;
        let base_w = model.params().get("vision/patch_embed/w")?;
        let base_b = model.params().get("vision/patch_embed/b")?;
        let base_pos = model.params().get("vision/pos_embed")?;
        let w = if patch == v.patch_size {
            base_w.clone()
        } else {
            let pv = patch.pow(3);
            Tensor::randn(&[pv, d], 1.0 / (pv as f64).sqrt(), rng)
        };
        let src_grid = v.volume_shape.map(|s| s / v.patch_size);
        let dst_grid = shape.map(|s| s / patch);
        let pos = if src_grid == dst_grid {
            base_pos.clone()
        } else if src_grid.iter().chain(&dst_grid).all(|&g| g >= 2) {
            resample_positions(base_pos, src_grid, dst_grid)?
        } else {
            Tensor::randn(&[n, d], 0.1, rng)
        };
        Ok(Self {
            patch,
            shape,
            w,
            b: base_b.clone(),
            pos,
        })
    }

    pub fn hook(&self, tape: &mut Tape, binder: &mut Binder, name: &str) -> Result<EmbedHook> {
        Ok(EmbedHook {
            w: binder.bind(tape, &format!("{name}/w"), &self.w)?,
            b: binder.bind(tape, &format!("{name}/b"), &self.b)?,
            pos: binder.bind(tape, &format!("{name}/pos"), &self.pos)?,
            patch: self.patch,
        })
    }
}

/// Per channel, resamples the positional table laid out on the patch grid.
fn resample_positions(pos: &Tensor, src: [usize; 3], dst: [usize; 3]) -> Result<Tensor> {
    let d = pos.shape()[1];
    let n_src: usize = src.iter().product();
    let n_dst: usize = dst.iter().product();
    let mut out = vec![0.0; n_dst * d];
    for c in 0..d {
        let chan = Tensor::from_fn(&src, |t| pos.data()[t * d + c]);
        let up = resample_volume(&chan, dst)?;
        for (t, &v) in up.data().iter().enumerate() {
            out[t * d + c] = v;
        }
    }
    debug_assert_eq!(pos.shape()[0], n_src);
    Tensor::new(&[n_dst, d], out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;
    use crate::foundation::{EncoderHooks, FoundationConfig, VisionEncoderConfig};

    fn small() -> FrozenFoundation {
        let mut cfg = FoundationConfig::default();
        cfg.vision = VisionEncoderConfig {
            volume_shape: [16, 16, 16],
            patch_size: 8,
            embed_dim: 16,
            layers: 1,
            heads: 2,
            mlp_dim: 16,
            proj_dim: 8,
        };
        cfg.text.embed_dim = 16;
        cfg.text.mlp_dim = 16;
        cfg.text.proj_dim = 8;
        cfg.text.layers = 1;
        cfg.text.heads = 2;
        let mut m = FrozenFoundation::init(cfg, 3).unwrap();
        m.freeze();
        m
    }

    #[test]
    fn copy_init_reproduces_frozen_tokens() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let re = ResolutionReembed::from_base(&m, [16, 16, 16], 8, &mut rng).unwrap();
        let vol = Tensor::randn(&[16, 16, 16], 1.0, &mut rng);
        let mut tape = Tape::new();
        let mut binder = Binder::trainable();
        let hooks = EncoderHooks {
            embed: Some(re.hook(&mut tape, &mut binder, "ct.reembed").unwrap()),
            ..Default::default()
        };
        let e = m
            .encode_image_on(&mut tape, &mut Binder::frozen(), &vol, &hooks)
            .unwrap();
        let base = m.encode_image(&vol).unwrap();
        assert_eq!(tape.value(e.tokens), &base.tokens);
        assert_eq!(tape.value(e.pooled), &base.pooled);
    }

    #[test]
    fn larger_volume_runs_through_frozen_blocks() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vol = Tensor::randn(&[24, 24, 24], 1.0, &mut rng);
        assert!(matches!(
            m.encode_image(&vol),
            Err(Error::Resolution { .. })
        ));
        let re = ResolutionReembed::from_base(&m, [24, 24, 24], 8, &mut rng).unwrap();
        assert_eq!(re.pos.shape(), &[27, 16]);
        let mut tape = Tape::new();
        let mut binder = Binder::trainable();
        let hooks = EncoderHooks {
            embed: Some(re.hook(&mut tape, &mut binder, "r").unwrap()),
            ..Default::default()
        };
        let e = m
            .encode_image_on(&mut tape, &mut Binder::frozen(), &vol, &hooks)
            .unwrap();
        assert_eq!(tape.shape(e.tokens), &[27, 16]);
        assert!(ResolutionReembed::from_base(&m, [20, 24, 24], 8, &mut rng).is_err());
    }

    #[test]
    fn resampled_positions_keep_corners() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let re = ResolutionReembed::from_base(&m, [32, 32, 32], 8, &mut rng).unwrap();
        let base = m.params().get("vision/pos_embed").unwrap();
        let d = 16;
        // grid 2³ → 4³: corner tokens coincide under corner alignment
        assert_eq!(&re.pos.data()[..d], &base.data()[..d]);
        assert_eq!(&re.pos.data()[63 * d..], &base.data()[7 * d..]);
    }
}

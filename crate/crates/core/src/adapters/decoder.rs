use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::foundation::{num_patches, unpatch_index_map};
use crate::params::Binder;

/// Per-token linear map to `p³` voxel logits, placed back by the inverse
/// patch layout.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderAdapter {
    pub patch: usize,
    pub shape: [usize; 3],
    /// `[d × p³]`
    pub w: Tensor,
    /// `[p³]`
    pub b: Tensor,
}

impl DecoderAdapter {
    pub fn new<R: Rng + ?Sized>(
        embed_dim: usize,
        patch: usize,
        shape: [usize; 3],
        init_std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        num_patches(&shape, patch)?;
        let pv = patch.pow(3);
        Ok(Self {
            patch,
            shape,
            w: Tensor::randn(&[embed_dim, pv], init_std, rng),
            b: Tensor::zeros(&[pv]),
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.w.shape()[0]
    }
}

/// `tokens [n×d] → logits [D×H×W]`.
pub fn decode_segmentation(
    tape: &mut Tape,
    binder: &mut Binder,
    name: &str,
    decoder: &DecoderAdapter,
    tokens: Var,
) -> Result<Var> {
    let n = num_patches(&decoder.shape, decoder.patch)?;
    if tape.shape(tokens) != [n, decoder.embed_dim()] {
        return Err(Error::shape(
            "decode_segmentation",
            tape.shape(tokens),
            &[n, decoder.embed_dim()],
        ));
    }
    let w = binder.bind(tape, &format!("{name}/w"), &decoder.w)?;
    let b = binder.bind(tape, &format!("{name}/b"), &decoder.b)?;
    let y = tape.matmul(tokens, w)?;
    let y = tape.add_bias(y, b)?;
    let inv = unpatch_index_map(&decoder.shape, decoder.patch)?;
    tape.gather(y, inv, &decoder.shape)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::foundation::patchify;

    #[test]
    fn zero_map_gives_half_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dec = DecoderAdapter::new(6, 4, [8, 8, 8], 0.0, &mut rng).unwrap();
        let mut tape = Tape::new();
        let t = tape
            .constant(&Tensor::randn(&[8, 6], 1.0, &mut rng))
            .unwrap();
        let y = decode_segmentation(&mut tape, &mut Binder::frozen(), "d", &dec, t).unwrap();
        let p = tape.sigmoid(y).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_decoder_inverts_patchify() {
        let shape = [8, 4, 12];
        let vol = Tensor::from_fn(&shape, |i| i as f64);
        let patches = patchify(&vol, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dec = DecoderAdapter::new(64, 4, shape, 0.0, &mut rng).unwrap();
        dec.w = Tensor::from_fn(&[64, 64], |i| if i / 64 == i % 64 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let t = tape.constant(&patches).unwrap();
        let y = decode_segmentation(&mut tape, &mut Binder::frozen(), "d", &dec, t).unwrap();
        assert_eq!(tape.value(y), &vol);
    }

    #[test]
    fn output_matches_volume_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for side in [32, 48] {
            let dec = DecoderAdapter::new(4, 8, [side; 3], 0.02, &mut rng).unwrap();
            let n = (side / 8).pow(3);
            let mut tape = Tape::new();
            let t = tape
                .constant(&Tensor::randn(&[n, 4], 1.0, &mut rng))
                .unwrap();
            let y = decode_segmentation(&mut tape, &mut Binder::frozen(), "d", &dec, t).unwrap();
            assert_eq!(tape.shape(y), &[side; 3]);
            let bad = tape.constant(&Tensor::zeros(&[n + 1, 4])).unwrap();
            assert!(matches!(
                decode_segmentation(&mut tape, &mut Binder::frozen(), "d", &dec, bad),
                Err(Error::Shape { .. })
            ));
        }
    }
}

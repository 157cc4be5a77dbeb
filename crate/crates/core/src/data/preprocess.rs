use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const HU_CLIP: (f64, f64) = (-1024.0, 1024.0);
pub const PET_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessSpec {
    pub hu_clip: (f64, f64),
    pub pet_eps: f64,
    pub target_resolution: [usize; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            hu_clip: HU_CLIP,
            pet_eps: PET_EPS,
            target_resolution: [32, 32, 32],
        }
    }
}

/// Clips to the HU window and maps it linearly onto `[-1, 1]`.
pub fn preprocess_ct(vol: &Tensor, spec: &PreprocessSpec) -> Tensor {
    let (lo, hi) = spec.hu_clip;
    let half = (hi - lo) / 2.0;
    let mid = (hi + lo) / 2.0;
    vol.map(|v| (v.clamp(lo, hi) - mid) / half)
}

/// Per-volume z-score, `(v − mean) / (std + ε)`.
pub fn preprocess_pet(vol: &Tensor, spec: &PreprocessSpec) -> Tensor {
    let n = vol.numel() as f64;
    let mean = vol.data().iter().sum::<f64>() / n;
    let var = vol
        .data()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n;
    let denom = var.sqrt() + spec.pet_eps;
    vol.map(|v| (v - mean) / denom)
}

/// Corner-aligned trilinear resampling. Equal source and target shapes
/// return an exact copy.
pub fn resample_volume(vol: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let src: [usize; 3] = vol
        .shape()
        .try_into()
        .map_err(|_| Error::shape("resample_volume", vol.shape(), &target))?;
    if target.iter().any(|&t| t < 2) || src.iter().any(|&s| s < 2) {
        return Err(Error::Contract(format!(
            "resampling needs at least 2 samples per axis, got {src:?} → {target:?}"
        )));
    }
    if src == target {
        return Ok(vol.clone());
    }
    let axis = |s: usize, t: usize| -> Vec<(usize, usize, f64)> {
        (0..t)
            .map(|i| {
                let pos = i as f64 * (s - 1) as f64 / (t - 1) as f64;
                let lo = (pos.floor() as usize).min(s - 2);
                (lo, lo + 1, pos - lo as f64)
            })
            .collect()
    };
    let (az, ay, ax) = (
        axis(src[0], target[0]),
        axis(src[1], target[1]),
        axis(src[2], target[2]),
    );
    let d = vol.data();
    let at = |z: usize, y: usize, x: usize| d[(z * src[1] + y) * src[2] + x];
    let mut out = Vec::with_capacity(target.iter().product());
    for &(z0, z1, fz) in &az {
        for &(y0, y1, fy) in &ay {
            for &(x0, x1, fx) in &ax {
                let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
                let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
                let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
                let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
                let c0 = c00 * (1.0 - fy) + c01 * fy;
                let c1 = c10 * (1.0 - fy) + c11 * fy;
                out.push(c0 * (1.0 - fz) + c1 * fz);
            }
        }
    }
    Tensor::new(&target, out)
}

/// Nearest-neighbour resampling for binary masks (corner-aligned).
pub fn resample_mask(mask: &Tensor, target: [usize; 3]) -> Result<Tensor> {
    let soft = resample_volume(mask, target)?;
    Ok(soft.map(|v| if v >= 0.5 { 1.0 } else { 0.0 }))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn ct_window_examples() {
        let spec = PreprocessSpec::default();
        let v = Tensor::new(&[5], vec![1024.0, -1024.0, 0.0, 5000.0, -5000.0]).unwrap();
        assert_eq!(
            preprocess_ct(&v, &spec).data(),
            &[1.0, -1.0, 0.0, 1.0, -1.0]
        );
    }

    #[test]
    fn ct_preprocessing_is_idempotent_inside_the_window() {
        let spec = PreprocessSpec::default();
        let v = Tensor::from_fn(&[50], |i| (i as f64 - 25.0) * 0.04);
        let once = preprocess_ct(&v, &spec);
        // values already in [-1, 1] are a fixed point only after rescaling back
        let back = once.map(|x| x * 1024.0);
        assert_eq!(preprocess_ct(&back, &spec), once);
    }

    #[test]
    fn pet_zscore_examples() {
        let spec = PreprocessSpec::default();
        let c = Tensor::full(&[4, 4, 4], 3.5);
        assert!(preprocess_pet(&c, &spec).data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Tensor::randn(&[6, 6, 6], 2.0, &mut rng).map(|x| x + 5.0);
        let z = preprocess_pet(&v, &spec);
        let n = z.numel() as f64;
        let mean = z.data().iter().sum::<f64>() / n;
        let std = (z.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);

        // invariance holds up to the ε term: |Δ| ≲ ε·|z|
        let affine = v.map(|x| 2.0 * x + 3.0);
        assert!(preprocess_pet(&affine, &spec).max_abs_diff(&z).unwrap() < 1e-7);
    }

    #[test]
    fn resample_identity_constant_and_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Tensor::randn(&[4, 5, 6], 1.0, &mut rng);
        assert_eq!(resample_volume(&v, [4, 5, 6]).unwrap(), v);

        let c = Tensor::full(&[4, 4, 4], 2.5);
        let up = resample_volume(&c, [7, 3, 9]).unwrap();
        assert!(up.data().iter().all(|&x| (x - 2.5).abs() < 1e-12));

        // f(z,y,x) = 1 + 2z − y + 0.5x on an 8³ grid, downsampled to 4³;
        // target index i maps to source coordinate i·7/3
        let ramp = Tensor::from_fn(&[8, 8, 8], |i| {
            let (z, y, x) = ((i / 64) as f64, ((i / 8) % 8) as f64, (i % 8) as f64);
            1.0 + 2.0 * z - y + 0.5 * x
        });
        let down = resample_volume(&ramp, [4, 4, 4]).unwrap();
        for (i, &got) in down.data().iter().enumerate() {
            let s = 7.0 / 3.0;
            let (z, y, x) = (
                (i / 16) as f64 * s,
                ((i / 4) % 4) as f64 * s,
                (i % 4) as f64 * s,
            );
            assert!((got - (1.0 + 2.0 * z - y + 0.5 * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_rejects_tiny_targets() {
        let v = Tensor::<f64>::zeros(&[4, 4, 4]);
        assert!(resample_volume(&v, [1, 4, 4]).is_err());
    }
}

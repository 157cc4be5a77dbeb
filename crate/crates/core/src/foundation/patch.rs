//! Cubic patch extraction and its inverse placement.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::config::num_patches;

/// For each position of the `[n × p³]` patch matrix, the flat index of the
/// source voxel. Patches run row-major over the `(D/p, H/p, W/p)` grid and
/// voxels row-major within each patch.
pub fn patch_index_map(shape: &[usize], patch: usize) -> Result<Vec<usize>> {
    let n = num_patches(shape, patch)?;
    let (h, w) = (shape[1], shape[2]);
    let (gh, gw) = (h / patch, w / patch);
    let mut map = Vec::with_capacity(n * patch.pow(3));
    for t in 0..n {
        let (gz, gy, gx) = (t / (gh * gw), (t / gw) % gh, t % gw);
        for z in 0..patch {
            for y in 0..patch {
                for x in 0..patch {
                    let (vz, vy, vx) = (gz * patch + z, gy * patch + y, gx * patch + x);
                    map.push((vz * h + vy) * w + vx);
                }
            }
        }
    }
    Ok(map)
}

/// Inverse of [`patch_index_map`]: for each voxel, its position in the patch
/// matrix.
pub fn unpatch_index_map(shape: &[usize], patch: usize) -> Result<Vec<usize>> {
    let fwd = patch_index_map(shape, patch)?;
    let mut inv = vec![0; fwd.len()];
    for (pos, &voxel) in fwd.iter().enumerate() {
        inv[voxel] = pos;
    }
    Ok(inv)
}

/// `[D×H×W] → [n × p³]`
pub fn patchify(vol: &Tensor, patch: usize) -> Result<Tensor> {
    if vol.rank() != 3 {
        return Err(Error::shape("patchify", vol.shape(), &[patch]));
    }
    let map = patch_index_map(vol.shape(), patch)?;
    let n = map.len() / patch.pow(3);
    let src = vol.data();
    Tensor::new(&[n, patch.pow(3)], map.iter().map(|&i| src[i]).collect())
}

/// `[n × p³] → [D×H×W]`
pub fn unpatchify(patches: &Tensor, shape: &[usize], patch: usize) -> Result<Tensor> {
    let inv = unpatch_index_map(shape, patch)?;
    if patches.numel() != inv.len() {
        return Err(Error::shape("unpatchify", patches.shape(), shape));
    }
    let src = patches.data();
    Tensor::new(shape, inv.iter().map(|&i| src[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinate_coded_volume_round_trips() {
        let shape = [16, 8, 24];
        let vol = Tensor::from_fn(&shape, |i| i as f64);
        let p = patchify(&vol, 4).unwrap();
        assert_eq!(p.shape(), &[4 * 2 * 6, 64]);
        // first patch, second row of voxels starts at (0, 1, 0)
        assert_eq!(p.data()[4], 24.0);
        // second patch is the next block along W
        assert_eq!(p.data()[64], 4.0);
        assert_eq!(unpatchify(&p, &shape, 4).unwrap(), vol);
    }

    #[test]
    fn rejects_indivisible_shapes() {
        let vol = Tensor::<f64>::zeros(&[10, 8, 8]);
        assert!(matches!(patchify(&vol, 4), Err(Error::Resolution { .. })));
    }
}

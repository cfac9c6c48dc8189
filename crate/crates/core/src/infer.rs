//! Whole-volume prediction: voxelwise batching and the zero-padded
//! 27-partition strided neighborhood scheme.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mlp::MlpNet;
use crate::synth::PATCH_VOXELS;
use crate::volume::{Volume4D, VoxelMask};

/// Rows per forward batch; results never depend on this cap.
pub const DEFAULT_BATCH_CAP: usize = 1024;

fn check_mask(vol: &Volume4D, mask: Option<&VoxelMask>) -> Result<()> {
    if let Some(m) = mask {
        let (x, y, z, _) = vol.dims;
        if m.dims != (x, y, z) {
            return Err(Error::Volume(format!(
                "mask dims {:?} do not match volume {:?}",
                m.dims, vol.dims
            )));
        }
    }
    Ok(())
}

/// Pushes every in-mask voxel through the model; out-of-mask voxels
/// stay zero. Negative outputs are clamped to zero so tanh-output
/// models produce valid coefficient maps.
pub fn predict_voxelwise(
    net: &MlpNet<f32>,
    vol: &Volume4D,
    mask: Option<&VoxelMask>,
    batch_cap: usize,
) -> Result<Volume4D> {
    let n = vol.channels();
    if net.input_dim() != n {
        return Err(Error::Volume(format!(
            "model expects {} input channels, volume has {n}",
            net.input_dim()
        )));
    }
    check_mask(vol, mask)?;
    let cap = batch_cap.max(1);
    let m = net.output_dim();
    let (x, y, z, _) = vol.dims;
    let nvox = vol.voxel_count();
    let mut out = vec![0.0f32; nvox * m];

    // Fixed-size chunks over the voxel axis; each task owns its output
    // slice, so thread count cannot affect results.
    let results: Result<Vec<()>> = out
        .par_chunks_mut(cap * m)
        .enumerate()
        .map(|(ci, out_chunk)| {
            let start = ci * cap;
            let count = out_chunk.len() / m;
            let rows: Vec<usize> = (start..start + count)
                .filter(|&v| mask.map_or(true, |mk| mk.included[v]))
                .collect();
            let mut input: Vec<f32> = Vec::with_capacity(cap * n);
            for batch in rows.chunks(cap) {
                input.clear();
                for &v in batch {
                    input.extend_from_slice(&vol.data[v * n..(v + 1) * n]);
                }
                let pred = net.forward_inference(&input)?;
                for (bi, &v) in batch.iter().enumerate() {
                    let dst = &mut out_chunk[(v - start) * m..(v - start + 1) * m];
                    for (d, &p) in dst.iter_mut().zip(&pred[bi * m..(bi + 1) * m]) {
                        *d = p.max(0.0);
                    }
                }
            }
            Ok(())
        })
        .collect();
    results?;

    Volume4D::new((x, y, z, m), out, vol.voxel_size)
}

/// The 27 center sets of the strided scheme: partition (a,b,c) holds
/// every voxel (i,j,k) with i=a, j=b, k=c (mod 3). Sets are disjoint,
/// cover the grid, and the 3x3x3 patches within one set never overlap.
pub fn strided_partitions(dims: (usize, usize, usize)) -> Vec<Vec<(usize, usize, usize)>> {
    let (x, y, z) = dims;
    let mut parts = vec![Vec::new(); 27];
    for a in 0..3usize {
        for b in 0..3usize {
            for c in 0..3usize {
                let set = &mut parts[(a * 3 + b) * 3 + c];
                let mut i = a;
                while i < x {
                    let mut j = b;
                    while j < y {
                        let mut k = c;
                        while k < z {
                            set.push((i, j, k));
                            k += 3;
                        }
                        j += 3;
                    }
                    i += 3;
                }
            }
        }
    }
    parts
}

/// Volume zero-padded by one voxel on each spatial face.
pub fn zero_pad_one(vol: &Volume4D) -> Volume4D {
    let (x, y, z, c) = vol.dims;
    let mut padded = Volume4D::zeros((x + 2, y + 2, z + 2, c));
    padded.voxel_size = vol.voxel_size;
    for i in 0..x {
        for j in 0..y {
            for k in 0..z {
                let src = vol.voxel(i, j, k);
                padded.voxel_mut(i + 1, j + 1, k + 1).copy_from_slice(src);
            }
        }
    }
    padded
}

/// Flattens the 3x3x3 patch centered at padded coords (i+1, j+1, k+1)
/// in the pinned ((di*3+dj)*3+dk)*n+c order.
fn gather_patch(padded: &Volume4D, center: (usize, usize, usize), out: &mut Vec<f32>) {
    let n = padded.channels();
    let (i, j, k) = center;
    for di in 0..3 {
        for dj in 0..3 {
            for dk in 0..3 {
                let src = padded.voxel(i + di, j + dj, k + dk);
                out.extend_from_slice(&src[..n]);
            }
        }
    }
}

/// Neighborhood prediction: zero-pad by one, process each of the 27
/// partitions in non-overlapping batches, scatter results to centers.
/// Bit-identical to a per-voxel loop because rows are independent.
pub fn predict_neighborhood(
    net: &MlpNet<f32>,
    vol: &Volume4D,
    mask: Option<&VoxelMask>,
    batch_cap: usize,
) -> Result<Volume4D> {
    let n = vol.channels();
    if net.input_dim() != PATCH_VOXELS * n {
        return Err(Error::Volume(format!(
            "model expects {} inputs, volume patches provide {}",
            net.input_dim(),
            PATCH_VOXELS * n
        )));
    }
    check_mask(vol, mask)?;
    let cap = batch_cap.max(1);
    let m = net.output_dim();
    let (x, y, z, _) = vol.dims;
    let padded = zero_pad_one(vol);
    let mut out = vec![0.0f32; vol.voxel_count() * m];

    for part in strided_partitions((x, y, z)) {
        let centers: Vec<(usize, usize, usize)> = part
            .into_iter()
            .filter(|&(i, j, k)| mask.map_or(true, |mk| mk.get(i, j, k)))
            .collect();
        let mut input: Vec<f32> = Vec::with_capacity(cap * PATCH_VOXELS * n);
        for batch in centers.chunks(cap) {
            input.clear();
            for &c in batch {
                gather_patch(&padded, c, &mut input);
            }
            let pred = net.forward_inference(&input)?;
            for (bi, &(i, j, k)) in batch.iter().enumerate() {
                let v = (i * y + j) * z + k;
                let dst = &mut out[v * m..(v + 1) * m];
                for (d, &p) in dst.iter_mut().zip(&pred[bi * m..(bi + 1) * m]) {
                    *d = p.max(0.0);
                }
            }
        }
    }

    Volume4D::new((x, y, z, m), out, vol.voxel_size)
}

//! In-memory 4D volumes and S0 normalization.

use crate::error::{Error, Result};
use crate::protocol::AcquisitionProtocol;

/// Dense 4D scalar volume, row-major with the channel axis fastest:
/// index = ((x*Y + y)*Z + z)*C + c.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    pub dims: (usize, usize, usize, usize),
    pub data: Vec<f32>,
    /// Voxel edge lengths in mm; metadata only.
    pub voxel_size: [f32; 3],
}

impl Volume4D {
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f32>, voxel_size: [f32; 3]) -> Result<Self> {
        let (x, y, z, c) = dims;
        let want = x * y * z * c;
        if data.len() != want {
            return Err(Error::Volume(format!(
                "data length {} does not match dims {:?} (= {})",
                data.len(),
                dims,
                want
            )));
        }
        if x == 0 || y == 0 || z == 0 || c == 0 {
            return Err(Error::Volume(format!("zero-sized dims {dims:?}")));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Volume(format!("non-finite value at linear index {pos}")));
        }
        Ok(Volume4D { dims, data, voxel_size })
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Self {
        let (x, y, z, c) = dims;
        Volume4D { dims, data: vec![0.0; x * y * z * c], voxel_size: [1.0; 3] }
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn channels(&self) -> usize {
        self.dims.3
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.1 + y) * self.dims.2 + z
    }

    /// Channel slice of one voxel.
    #[inline]
    pub fn voxel(&self, x: usize, y: usize, z: usize) -> &[f32] {
        let c = self.dims.3;
        let base = self.voxel_index(x, y, z) * c;
        &self.data[base..base + c]
    }

    #[inline]
    pub fn voxel_mut(&mut self, x: usize, y: usize, z: usize) -> &mut [f32] {
        let c = self.dims.3;
        let base = self.voxel_index(x, y, z) * c;
        &mut self.data[base..base + c]
    }
}

/// One bit per voxel, indexed like the spatial part of Volume4D.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelMask {
    pub dims: (usize, usize, usize),
    pub included: Vec<bool>,
}

impl VoxelMask {
    pub fn all(dims: (usize, usize, usize)) -> Self {
        VoxelMask { dims, included: vec![true; dims.0 * dims.1 * dims.2] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims.1 + y) * self.dims.2 + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.included[self.index(x, y, z)]
    }

    pub fn count_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    /// Intersects with a volume interpreted as a mask (nonzero = included).
    pub fn intersect_volume(&mut self, vol: &Volume4D) -> Result<()> {
        let (x, y, z, c) = vol.dims;
        if (x, y, z) != self.dims || c != 1 {
            return Err(Error::Volume(format!(
                "mask volume dims {:?} do not match {:?} x 1",
                vol.dims, self.dims
            )));
        }
        for (slot, &v) in self.included.iter_mut().zip(&vol.data) {
            *slot = *slot && v != 0.0;
        }
        Ok(())
    }
}

/// Voxels whose mean b=0 signal falls at or below this are treated as
/// background and never reach a predictor.
pub const EPSILON_S0: f32 = 1e-8;

/// Divides every b>0 channel by the per-voxel mean of the b=0 channels.
/// Returns (normalized volume with only b>0 channels, S0 map, inclusion
/// mask with background voxels cleared). Negative normalized values are
/// clamped to zero.
pub fn normalize_signals(
    vol: &Volume4D,
    proto: &AcquisitionProtocol,
) -> Result<(Volume4D, Volume4D, VoxelMask)> {
    if proto.n() != vol.channels() {
        return Err(Error::Volume(format!(
            "protocol has {} entries but volume has {} channels",
            proto.n(),
            vol.channels()
        )));
    }
    let b0 = proto.b0_indices();
    if b0.is_empty() {
        return Err(Error::Protocol("normalization requires at least one b=0 acquisition".into()));
    }
    let dwi = proto.dwi_indices();
    let (x, y, z, _) = vol.dims;
    let nv = vol.voxel_count();
    let mut out = vec![0.0f32; nv * dwi.len()];
    let mut s0_map = vec![0.0f32; nv];
    let mut mask = VoxelMask::all((x, y, z));

    for v in 0..nv {
        let sig = &vol.data[v * vol.channels()..(v + 1) * vol.channels()];
        let mut s0 = 0.0f64;
        for &i in &b0 {
            s0 += sig[i] as f64;
        }
        let s0 = (s0 / b0.len() as f64) as f32;
        s0_map[v] = s0;
        let dst = &mut out[v * dwi.len()..(v + 1) * dwi.len()];
        if s0 <= EPSILON_S0 {
            mask.included[v] = false;
            continue;
        }
        for (k, &i) in dwi.iter().enumerate() {
            dst[k] = (sig[i] / s0).max(0.0);
        }
    }

    let normalized = Volume4D::new((x, y, z, dwi.len()), out, vol.voxel_size)?;
    let s0_vol = Volume4D::new((x, y, z, 1), s0_map, vol.voxel_size)?;
    Ok((normalized, s0_vol, mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn proto_2ch() -> AcquisitionProtocol {
        AcquisitionProtocol::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![0.0, 2000.0]).unwrap()
    }

    #[test]
    fn rejects_bad_length() {
        assert!(Volume4D::new((2, 2, 2, 2), vec![0.0; 15], [1.0; 3]).is_err());
    }

    #[test]
    fn voxel_slices_are_channel_fastest() {
        let mut v = Volume4D::zeros((2, 3, 4, 5));
        v.voxel_mut(1, 2, 3)[4] = 7.0;
        let idx = ((1 * 3 + 2) * 4 + 3) * 5 + 4;
        assert_eq!(v.data[idx], 7.0);
    }

    #[test]
    fn normalizes_single_voxel() {
        let vol = Volume4D::new((1, 1, 1, 2), vec![100.0, 24.66], [1.0; 3]).unwrap();
        let (norm, s0, mask) = normalize_signals(&vol, &proto_2ch()).unwrap();
        assert_eq!(norm.dims, (1, 1, 1, 1));
        assert_relative_eq!(norm.data[0], 0.2466, epsilon = 1e-6);
        assert_eq!(s0.data[0], 100.0);
        assert!(mask.get(0, 0, 0));
    }

    #[test]
    fn zero_s0_is_masked_out() {
        let vol = Volume4D::new((1, 1, 1, 2), vec![0.0, 5.0], [1.0; 3]).unwrap();
        let (norm, _, mask) = normalize_signals(&vol, &proto_2ch()).unwrap();
        assert_eq!(norm.data[0], 0.0);
        assert!(!mask.get(0, 0, 0));
    }

    #[test]
    fn multiple_b0_channels_average() {
        let proto = AcquisitionProtocol::new(
            vec![[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]],
            vec![0.0, 0.0, 1000.0],
        )
        .unwrap();
        let vol = Volume4D::new((1, 1, 1, 3), vec![90.0, 110.0, 50.0], [1.0; 3]).unwrap();
        let (norm, s0, _) = normalize_signals(&vol, &proto).unwrap();
        assert_eq!(s0.data[0], 100.0);
        assert_relative_eq!(norm.data[0], 0.5, epsilon = 1e-6);
    }

    #[test]
    fn scaling_invariance() {
        let proto = proto_2ch();
        let base = Volume4D::new((1, 1, 2, 2), vec![100.0, 30.0, 80.0, 60.0], [1.0; 3]).unwrap();
        let scaled =
            Volume4D::new((1, 1, 2, 2), base.data.iter().map(|v| v * 3.5).collect(), [1.0; 3]).unwrap();
        let (n1, _, _) = normalize_signals(&base, &proto).unwrap();
        let (n2, _, _) = normalize_signals(&scaled, &proto).unwrap();
        for (a, b) in n1.data.iter().zip(&n2.data) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn negative_values_clamp_to_zero() {
        let vol = Volume4D::new((1, 1, 1, 2), vec![100.0, -3.0], [1.0; 3]).unwrap();
        let (norm, _, _) = normalize_signals(&vol, &proto_2ch()).unwrap();
        assert_eq!(norm.data[0], 0.0);
    }
}

//! Patch extraction and training-time augmentation: per-axis rotation,
//! isotropic scaling, and elastic deformation, applied with identical
//! geometry to image and label.
//!
//! All randomness flows through one seeded ChaCha generator, so the full
//! augmentation stream is reproducible from (seed, config, input).

use crate::error::{Error, Result};
use crate::parallel;
use crate::volume::{VolumeKind, VoxelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct AugmentConfig {
    /// Rotation range in degrees, sampled per axis in [-rot_deg, +rot_deg].
    pub rot_deg: f64,
    /// Isotropic scale sampled in [1 - scale_frac, 1 + scale_frac].
    pub scale_frac: f64,
    /// SD of control-point displacements, in voxels.
    pub elastic_sd: f64,
    /// Control grid spacing in voxels.
    pub elastic_grid_spacing: usize,
    pub patch_size: [usize; 3],
    pub patches_per_volume: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rot_deg: 10.0,
            scale_frac: 0.10,
            elastic_sd: 1.0,
            elastic_grid_spacing: 32,
            patch_size: [152, 152, 96],
            patches_per_volume: 20,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rot_deg < 0.0 {
            return Err(Error::InvalidConfig("rot_deg must be >= 0".into()));
        }
        if !(self.scale_frac.abs() < 1.0) {
            return Err(Error::InvalidConfig("|scale_frac| must be < 1".into()));
        }
        if self.elastic_sd < 0.0 {
            return Err(Error::InvalidConfig("elastic_sd must be >= 0".into()));
        }
        if self.elastic_grid_spacing == 0 {
            return Err(Error::InvalidConfig("elastic_grid_spacing must be > 0".into()));
        }
        for &p in &self.patch_size {
            if p < 8 || p % 8 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "patch_size component {p} must be >= 8 and divisible by 8"
                )));
            }
        }
        Ok(())
    }
}

/// Forward affine transform about a center: rotation (per-axis angles,
/// applied Rz·Ry·Rx) composed with an isotropic scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform {
    pub matrix: [[f64; 3]; 3],
    pub center: [f64; 3],
}

impl AffineTransform {
    pub fn identity(center: [f64; 3]) -> Self {
        AffineTransform {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            center,
        }
    }

    pub fn from_angles_scale(angles_deg: [f64; 3], scale: f64, center: [f64; 3]) -> Self {
        let [ax, ay, az] = angles_deg.map(f64::to_radians);
        let (sx, cx) = ax.sin_cos();
        let (sy, cy) = ay.sin_cos();
        let (sz, cz) = az.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let mut m = mat_mul(&mat_mul(&rz, &ry), &rx);
        for row in &mut m {
            for v in row {
                *v *= scale;
            }
        }
        AffineTransform { matrix: m, center }
    }

    /// Maps a point through the inverse transform (about the center).
    pub fn inverse_apply(&self, p: [f64; 3]) -> [f64; 3] {
        let inv = invert3(&self.matrix);
        let d: [f64; 3] = std::array::from_fn(|i| p[i] - self.center[i]);
        std::array::from_fn(|i| {
            inv[i][0] * d[0] + inv[i][1] * d[1] + inv[i][2] * d[2] + self.center[i]
        })
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let inv_det = 1.0 / det;
    let cof = |r1: usize, c1: usize, r2: usize, c2: usize| m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
    [
        [
            cof(1, 1, 2, 2) * inv_det,
            -cof(0, 1, 2, 2) * inv_det,
            cof(0, 1, 1, 2) * inv_det,
        ],
        [
            -cof(1, 0, 2, 2) * inv_det,
            cof(0, 0, 2, 2) * inv_det,
            -cof(0, 0, 1, 2) * inv_det,
        ],
        [
            cof(1, 0, 2, 1) * inv_det,
            -cof(0, 0, 2, 1) * inv_det,
            cof(0, 0, 1, 1) * inv_det,
        ],
    ]
}

/// Dense per-voxel displacement field (in voxel units).
#[derive(Debug, Clone)]
pub struct DisplacementField {
    pub dims: [usize; 3],
    pub disp: Vec<[f32; 3]>,
}

impl DisplacementField {
    pub fn zero(dims: [usize; 3]) -> Self {
        DisplacementField {
            dims,
            disp: vec![[0.0; 3]; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        self.disp[x + self.dims[0] * (y + self.dims[1] * z)]
    }
}

/// Draws rotation angles per axis and an isotropic scale, centered on the
/// patch center of `patch_dims`.
pub fn random_affine(cfg: &AugmentConfig, rng: &mut impl Rng, patch_dims: [usize; 3]) -> AffineTransform {
    let angles: [f64; 3] = std::array::from_fn(|_| {
        if cfg.rot_deg > 0.0 {
            rng.gen_range(-cfg.rot_deg..=cfg.rot_deg)
        } else {
            0.0
        }
    });
    let scale = if cfg.scale_frac > 0.0 {
        rng.gen_range(1.0 - cfg.scale_frac..=1.0 + cfg.scale_frac)
    } else {
        1.0
    };
    let center: [f64; 3] = std::array::from_fn(|a| (patch_dims[a] as f64 - 1.0) / 2.0);
    AffineTransform::from_angles_scale(angles, scale, center)
}

/// Gaussian displacements on a control grid of spacing
/// `elastic_grid_spacing`, trilinearly interpolated to a dense field.
pub fn elastic_field(dims: [usize; 3], cfg: &AugmentConfig, rng: &mut impl Rng) -> DisplacementField {
    if cfg.elastic_sd == 0.0 {
        return DisplacementField::zero(dims);
    }
    let g = cfg.elastic_grid_spacing;
    // control points at 0, g, 2g, ... covering [0, dim-1]
    let ncp: [usize; 3] = std::array::from_fn(|a| (dims[a] - 1) / g + 2);
    let normal = Normal::new(0.0, cfg.elastic_sd).unwrap();
    let mut control = vec![[0.0f64; 3]; ncp[0] * ncp[1] * ncp[2]];
    for c in &mut control {
        for v in c.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    let cp = |i: usize, j: usize, k: usize| control[i + ncp[0] * (j + ncp[1] * k)];
    let [nx, ny, _] = dims;
    let mut disp = vec![[0.0f32; 3]; dims[0] * dims[1] * dims[2]];
    parallel::for_each_chunk_mut(&mut disp, nx * ny, |z, plane| {
        let tz = z as f64 / g as f64;
        let k0 = (tz.floor() as usize).min(ncp[2] - 1);
        let k1 = (k0 + 1).min(ncp[2] - 1);
        let fz = tz - k0 as f64;
        for y in 0..ny {
            let ty = y as f64 / g as f64;
            let j0 = (ty.floor() as usize).min(ncp[1] - 1);
            let j1 = (j0 + 1).min(ncp[1] - 1);
            let fy = ty - j0 as f64;
            for x in 0..nx {
                let tx = x as f64 / g as f64;
                let i0 = (tx.floor() as usize).min(ncp[0] - 1);
                let i1 = (i0 + 1).min(ncp[0] - 1);
                let fx = tx - i0 as f64;
                let mut out = [0.0f32; 3];
                for a in 0..3 {
                    let c00 = cp(i0, j0, k0)[a] * (1.0 - fx) + cp(i1, j0, k0)[a] * fx;
                    let c10 = cp(i0, j1, k0)[a] * (1.0 - fx) + cp(i1, j1, k0)[a] * fx;
                    let c01 = cp(i0, j0, k1)[a] * (1.0 - fx) + cp(i1, j0, k1)[a] * fx;
                    let c11 = cp(i0, j1, k1)[a] * (1.0 - fx) + cp(i1, j1, k1)[a] * fx;
                    let c0 = c00 * (1.0 - fy) + c10 * fy;
                    let c1 = c01 * (1.0 - fy) + c11 * fy;
                    out[a] = (c0 * (1.0 - fz) + c1 * fz) as f32;
                }
                plane[x + nx * y] = out;
            }
        }
    });
    DisplacementField { dims, disp }
}

fn sample_zero_padded_trilinear(vol: &VoxelVolume, pos: [f64; 3]) -> f64 {
    let [nx, ny, nz] = vol.dims;
    let x0 = pos[0].floor() as i64;
    let y0 = pos[1].floor() as i64;
    let z0 = pos[2].floor() as i64;
    let fx = pos[0] - x0 as f64;
    let fy = pos[1] - y0 as f64;
    let fz = pos[2] - z0 as f64;
    let fetch = |x: i64, y: i64, z: i64| -> f64 {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            0.0
        } else {
            vol.at(x as usize, y as usize, z as usize) as f64
        }
    };
    let c00 = fetch(x0, y0, z0) * (1.0 - fx) + fetch(x0 + 1, y0, z0) * fx;
    let c10 = fetch(x0, y0 + 1, z0) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, z0) * fx;
    let c01 = fetch(x0, y0, z0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0, z0 + 1) * fx;
    let c11 = fetch(x0, y0 + 1, z0 + 1) * (1.0 - fx) + fetch(x0 + 1, y0 + 1, z0 + 1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

fn sample_zero_padded_nearest(vol: &VoxelVolume, pos: [f64; 3]) -> f32 {
    let idx: [i64; 3] = std::array::from_fn(|a| pos[a].round() as i64);
    for a in 0..3 {
        if idx[a] < 0 || idx[a] >= vol.dims[a] as i64 {
            return 0.0;
        }
    }
    vol.at(idx[0] as usize, idx[1] as usize, idx[2] as usize)
}

/// Backward warping: each output voxel samples the input at the
/// inverse-affine position plus the displacement at that voxel. Trilinear for
/// intensity, nearest-neighbor for labels; out-of-bounds samples are 0.
pub fn warp(
    vol: &VoxelVolume,
    transform: &AffineTransform,
    field: &DisplacementField,
) -> Result<VoxelVolume> {
    if field.dims != vol.dims {
        return Err(Error::DimMismatch(format!(
            "field dims {:?} vs volume dims {:?}",
            field.dims, vol.dims
        )));
    }
    let [nx, ny, _] = vol.dims;
    let kind = vol.kind;
    let mut data = vec![0.0f32; vol.len()];
    parallel::for_each_chunk_mut(&mut data, nx * ny, |z, plane| {
        for y in 0..ny {
            for x in 0..nx {
                let d = field.at(x, y, z);
                let base = transform.inverse_apply([x as f64, y as f64, z as f64]);
                let pos: [f64; 3] = std::array::from_fn(|a| base[a] + d[a] as f64);
                plane[x + nx * y] = match kind {
                    VolumeKind::Intensity => sample_zero_padded_trilinear(vol, pos) as f32,
                    VolumeKind::Label => sample_zero_padded_nearest(vol, pos),
                };
            }
        }
    });
    VoxelVolume::new(vol.dims, vol.spacing, vol.origin, data, vol.kind)
}

/// Copies the `size` sub-block starting at `origin` (voxel indices).
pub fn crop(vol: &VoxelVolume, origin: [usize; 3], size: [usize; 3]) -> Result<VoxelVolume> {
    for a in 0..3 {
        if origin[a] + size[a] > vol.dims[a] {
            return Err(Error::DimMismatch(format!(
                "crop origin {origin:?} + size {size:?} exceeds dims {:?}",
                vol.dims
            )));
        }
    }
    let mut data = Vec::with_capacity(size[0] * size[1] * size[2]);
    for z in 0..size[2] {
        for y in 0..size[1] {
            let src = vol.index(origin[0], origin[1] + y, origin[2] + z);
            data.extend_from_slice(&vol.data[src..src + size[0]]);
        }
    }
    let world_origin: [f64; 3] =
        std::array::from_fn(|a| vol.origin[a] + origin[a] as f64 * vol.spacing[a]);
    VoxelVolume::new(size, vol.spacing, world_origin, data, vol.kind)
}

/// Draws `patches_per_volume` patch origins uniformly over the valid region
/// and crops image and label at identical locations.
pub fn sample_patches(
    image: &VoxelVolume,
    label: &VoxelVolume,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Vec<(VoxelVolume, VoxelVolume)>> {
    cfg.validate()?;
    if image.dims != label.dims {
        return Err(Error::DimMismatch(format!(
            "image dims {:?} vs label dims {:?}",
            image.dims, label.dims
        )));
    }
    for a in 0..3 {
        if image.dims[a] < cfg.patch_size[a] {
            return Err(Error::DimMismatch(format!(
                "volume dims {:?} smaller than patch size {:?}",
                image.dims, cfg.patch_size
            )));
        }
    }
    let mut out = Vec::with_capacity(cfg.patches_per_volume);
    for _ in 0..cfg.patches_per_volume {
        let origin: [usize; 3] = std::array::from_fn(|a| {
            let max = image.dims[a] - cfg.patch_size[a];
            if max == 0 {
                0
            } else {
                rng.gen_range(0..=max)
            }
        });
        out.push((
            crop(image, origin, cfg.patch_size)?,
            crop(label, origin, cfg.patch_size)?,
        ));
    }
    Ok(out)
}

/// Applies one random affine + elastic deformation to an (image, label)
/// patch pair with identical geometry.
pub fn augment_pair(
    image: &VoxelVolume,
    label: &VoxelVolume,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(VoxelVolume, VoxelVolume)> {
    let transform = random_affine(cfg, rng, image.dims);
    let field = elastic_field(image.dims, cfg, rng);
    Ok((warp(image, &transform, &field)?, warp(label, &transform, &field)?))
}

/// Independent per-volume generator derived from (seed, volume id), so
/// parallel volume streams never interact.
pub fn volume_rng(seed: u64, volume_id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ volume_id.wrapping_mul(0x9E3779B97F4A7C15))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_cfg(patch: [usize; 3]) -> AugmentConfig {
        AugmentConfig {
            patch_size: patch,
            ..Default::default()
        }
    }

    fn gradient_volume(dims: [usize; 3]) -> VoxelVolume {
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|i| (i % 97) as f32).collect();
        VoxelVolume::new(dims, [1.0; 3], [0.0; 3], data, VolumeKind::Intensity).unwrap()
    }

    #[test]
    fn zero_ranges_give_identity_transform() {
        let cfg = AugmentConfig {
            rot_deg: 0.0,
            scale_frac: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_affine(&cfg, &mut rng, [16, 16, 16]);
        assert_eq!(t.matrix, AffineTransform::identity(t.center).matrix);
    }

    #[test]
    fn sampled_parameters_stay_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let angles: [f64; 3] =
                std::array::from_fn(|_| rng.gen_range(-cfg.rot_deg..=cfg.rot_deg));
            let scale = rng.gen_range(1.0 - cfg.scale_frac..=1.0 + cfg.scale_frac);
            for a in angles {
                assert!(a.abs() <= 10.0);
            }
            assert!((0.9..=1.1).contains(&scale));
        }
    }

    #[test]
    fn elastic_sd_zero_is_zero_field() {
        let cfg = AugmentConfig {
            elastic_sd: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = elastic_field([16, 16, 16], &cfg, &mut rng);
        assert!(f.disp.iter().all(|d| *d == [0.0; 3]));
    }

    #[test]
    fn dense_field_interpolates_control_points() {
        let cfg = AugmentConfig {
            elastic_grid_spacing: 8,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = [17, 17, 17];
        let f = elastic_field(dims, &cfg, &mut rng);
        // reconstruct the control values that were drawn
        let ncp: [usize; 3] = std::array::from_fn(|a| (dims[a] - 1) / 8 + 2);
        let normal = Normal::new(0.0, cfg.elastic_sd).unwrap();
        let mut rng2 = ChaCha8Rng::seed_from_u64(11);
        let mut control = vec![[0.0f64; 3]; ncp[0] * ncp[1] * ncp[2]];
        for c in &mut control {
            for v in c.iter_mut() {
                *v = normal.sample(&mut rng2);
            }
        }
        // grid nodes that fall inside the volume must match exactly
        for k in 0..ncp[2] {
            for j in 0..ncp[1] {
                for i in 0..ncp[0] {
                    let (x, y, z) = (i * 8, j * 8, k * 8);
                    if x >= dims[0] || y >= dims[1] || z >= dims[2] {
                        continue;
                    }
                    let expect = control[i + ncp[0] * (j + ncp[1] * k)];
                    let got = f.at(x, y, z);
                    for a in 0..3 {
                        assert!((got[a] as f64 - expect[a]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn control_displacement_statistics() {
        let normal = Normal::new(0.0, 1.0f64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let sd = (draws.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64).sqrt();
        let se = 1.0 / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn identity_warp_is_identity() {
        let vol = gradient_volume([12, 10, 8]);
        let t = AffineTransform::identity([5.5, 4.5, 3.5]);
        let f = DisplacementField::zero(vol.dims);
        let out = warp(&vol, &t, &f).unwrap();
        assert_eq!(out.data, vol.data);
    }

    #[test]
    fn rotated_impulse_lands_at_rotated_coordinate() {
        let dims = [9, 9, 9];
        let mut vol = VoxelVolume::zeros(dims, VolumeKind::Label);
        let i = vol.index(7, 4, 4); // +3 along x from center (4,4,4)
        vol.data[i] = 1.0;
        let t = AffineTransform::from_angles_scale([0.0, 0.0, 90.0], 1.0, [4.0, 4.0, 4.0]);
        let out = warp(&vol, &t, &DisplacementField::zero(dims)).unwrap();
        // forward rotation by +90 deg about z maps (+3,0,0) -> (0,+3,0)
        assert_eq!(out.at(4, 7, 4), 1.0);
        assert_eq!(out.data.iter().map(|&v| v as f64).sum::<f64>(), 1.0);
    }

    #[test]
    fn warped_labels_stay_binary() {
        let dims = [24, 24, 24];
        let mut vol = VoxelVolume::zeros(dims, VolumeKind::Label);
        for z in 8..16 {
            for y in 8..16 {
                for x in 8..16 {
                    let i = vol.index(x, y, z);
                    vol.data[i] = 1.0;
                }
            }
        }
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..10 {
            let t = random_affine(&cfg, &mut rng, dims);
            let f = elastic_field(dims, &cfg, &mut rng);
            let out = warp(&vol, &t, &f).unwrap();
            assert!(out.data.iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn scaled_sphere_volume_grows_cubically() {
        let dims = [48, 48, 48];
        let c = 23.5;
        let r = 10.0;
        let mut vol = VoxelVolume::zeros(dims, VolumeKind::Label);
        for z in 0..48 {
            for y in 0..48 {
                for x in 0..48 {
                    let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2) + (z as f64 - c).powi(2);
                    if d2 <= r * r {
                        let i = vol.index(x, y, z);
                        vol.data[i] = 1.0;
                    }
                }
            }
        }
        let before: f64 = vol.data.iter().map(|&v| v as f64).sum();
        let t = AffineTransform::from_angles_scale([0.0; 3], 1.1, [c, c, c]);
        let out = warp(&vol, &t, &DisplacementField::zero(dims)).unwrap();
        let after: f64 = out.data.iter().map(|&v| v as f64).sum();
        let ratio = after / before;
        assert!((ratio - 1.1f64.powi(3)).abs() / 1.1f64.powi(3) < 0.05, "ratio {ratio}");
    }

    #[test]
    fn patch_sampling_is_deterministic_and_sized() {
        let image = gradient_volume([32, 32, 24]);
        let mut label = VoxelVolume::zeros([32, 32, 24], VolumeKind::Label);
        label.data[100] = 1.0;
        let cfg = AugmentConfig {
            patch_size: [16, 16, 8],
            ..Default::default()
        };
        let mut rng1 = ChaCha8Rng::seed_from_u64(9);
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        let a = sample_patches(&image, &label, &cfg, &mut rng1).unwrap();
        let b = sample_patches(&image, &label, &cfg, &mut rng2).unwrap();
        assert_eq!(a.len(), 20);
        for ((ia, la), (ib, lb)) in a.iter().zip(&b) {
            assert_eq!(ia.dims, [16, 16, 8]);
            assert_eq!(ia.data, ib.data);
            assert_eq!(la.data, lb.data);
        }
    }

    #[test]
    fn patch_sized_volume_yields_identical_patches() {
        let image = gradient_volume([16, 16, 8]);
        let label = VoxelVolume::zeros([16, 16, 8], VolumeKind::Label);
        let cfg = small_cfg([16, 16, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches = sample_patches(&image, &label, &cfg, &mut rng).unwrap();
        for (img, _) in &patches {
            assert_eq!(img.data, image.data);
        }
    }

    #[test]
    fn volume_too_small_is_error() {
        let image = gradient_volume([8, 8, 8]);
        let label = VoxelVolume::zeros([8, 8, 8], VolumeKind::Label);
        let cfg = small_cfg([16, 16, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_patches(&image, &label, &cfg, &mut rng).is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let cfg = AugmentConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: AugmentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
    }
}

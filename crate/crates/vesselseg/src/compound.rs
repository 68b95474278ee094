//! Freehand compounding: reconstructing a regular voxel volume from
//! electromagnetically tracked 2D frames.
//!
//! Forward mapping with mean binning: every pixel center is transformed into
//! world coordinates, binned to its nearest voxel, and covered voxels take
//! the arithmetic mean of their contributions. Holes left by sparse sweeps
//! are filled by repeated neighborhood averaging over covered voxels only.
//!
//! Frames are processed in parallel but accumulated in frame order with f64
//! sums, so the result is bitwise independent of the thread count.

use crate::error::{Error, Result};
use crate::parallel;
use crate::volume::{read_volume, VolumeKind, VoxelVolume};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrackedFrame {
    /// Row-major h*w pixel values.
    pub pixels: Vec<f32>,
    pub height: usize,
    pub width: usize,
    /// mm per pixel along (u, v).
    pub pixel_spacing: [f64; 2],
    /// Rigid transform (row-major 4x4) from frame coordinates to world.
    pub pose: [[f64; 4]; 4],
}

impl TrackedFrame {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidVolume("empty frame".into()));
        }
        if self.pixels.len() != self.height * self.width {
            return Err(Error::DimMismatch(format!(
                "frame pixel count {} != {}x{}",
                self.pixels.len(),
                self.height,
                self.width
            )));
        }
        if self
            .pixel_spacing
            .iter()
            .any(|&s| !(s > 0.0) || !s.is_finite())
        {
            return Err(Error::InvalidVolume(format!(
                "bad pixel spacing {:?}",
                self.pixel_spacing
            )));
        }
        let r = &self.pose;
        // orthonormality: R^T R = I within 1e-6
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-6 {
                    return Err(Error::InvalidPose(format!(
                        "rotation not orthonormal: (R^T R)[{i}][{j}] = {dot}"
                    )));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidPose(format!("det(R) = {det}, expected 1")));
        }
        if r[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidPose("last pose row must be 0 0 0 1".into()));
        }
        Ok(())
    }

    /// World position of the center of pixel (u, v).
    pub fn pixel_world(&self, u: usize, v: usize) -> [f64; 3] {
        let p = [
            u as f64 * self.pixel_spacing[0],
            v as f64 * self.pixel_spacing[1],
            0.0,
        ];
        let r = &self.pose;
        std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + r[i][3])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum BoundsMode {
    AutoFit,
    Explicit { origin: [f64; 3], dims: [usize; 3] },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CompoundConfig {
    pub voxel_spacing: f64,
    pub hole_fill_radius: usize,
    pub bounds_mode: BoundsMode,
}

impl Default for CompoundConfig {
    fn default() -> Self {
        CompoundConfig {
            voxel_spacing: 1.0,
            hole_fill_radius: 1,
            bounds_mode: BoundsMode::AutoFit,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompoundOutput {
    pub volume: VoxelVolume,
    pub coverage: VoxelVolume,
    /// Set when explicit bounds excluded every pixel.
    pub all_pixels_excluded: bool,
}

/// Axis-aligned bounding box of all transformed pixel centers, expanded to
/// whole voxels and centered so every pixel center bins strictly inside.
pub fn fit_bounds(frames: &[TrackedFrame], voxel_spacing: f64) -> Result<([f64; 3], [usize; 3])> {
    if frames.is_empty() {
        return Err(Error::EmptyFrames);
    }
    if !(voxel_spacing > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "voxel spacing {voxel_spacing} must be positive"
        )));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for frame in frames {
        frame.validate()?;
        // extremes are attained at frame corners since the map is affine
        for &u in &[0, frame.width - 1] {
            for &v in &[0, frame.height - 1] {
                let p = frame.pixel_world(u, v);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
    }
    let dims: [usize; 3] =
        std::array::from_fn(|a| ((hi[a] - lo[a]) / voxel_spacing).floor() as usize + 1);
    // distribute the slack symmetrically so edge pixels stay inside
    let origin: [f64; 3] =
        std::array::from_fn(|a| lo[a] - (dims[a] as f64 * voxel_spacing - (hi[a] - lo[a])) / 2.0);
    Ok((origin, dims))
}

pub fn compound(frames: &[TrackedFrame], cfg: &CompoundConfig) -> Result<CompoundOutput> {
    if frames.is_empty() {
        return Err(Error::EmptyFrames);
    }
    let (origin, dims) = match &cfg.bounds_mode {
        BoundsMode::AutoFit => fit_bounds(frames, cfg.voxel_spacing)?,
        BoundsMode::Explicit { origin, dims } => {
            for f in frames {
                f.validate()?;
            }
            (*origin, *dims)
        }
    };
    let n = dims[0] * dims[1] * dims[2];
    let vs = cfg.voxel_spacing;

    // per-frame (voxel index, value) contributions, computed in parallel
    let contributions: Vec<Vec<(u32, f32)>> = parallel::map_indexed(frames.len(), |fi| {
        let frame = &frames[fi];
        let mut out = Vec::with_capacity(frame.pixels.len());
        for v in 0..frame.height {
            for u in 0..frame.width {
                let p = frame.pixel_world(u, v);
                let mut idx = [0usize; 3];
                let mut inside = true;
                for a in 0..3 {
                    let i = ((p[a] - origin[a]) / vs).floor();
                    if i < 0.0 || i >= dims[a] as f64 {
                        inside = false;
                        break;
                    }
                    idx[a] = i as usize;
                }
                if inside {
                    let lin = idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]);
                    out.push((lin as u32, frame.pixels[u + frame.width * v]));
                }
            }
        }
        out
    });

    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let mut any = false;
    for contrib in &contributions {
        for &(lin, val) in contrib {
            sum[lin as usize] += val as f64;
            count[lin as usize] += 1;
            any = true;
        }
    }

    let data: Vec<f32> = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 })
        .collect();
    let coverage_data: Vec<f32> = count.iter().map(|&c| (c > 0) as u8 as f32).collect();

    let mut volume = VoxelVolume::new(dims, [vs; 3], origin, data, VolumeKind::Intensity)?;
    let coverage = VoxelVolume::new(dims, [vs; 3], origin, coverage_data, VolumeKind::Label)?;
    if cfg.hole_fill_radius > 0 && any {
        volume = fill_holes_to_fixpoint(&volume, &coverage, cfg.hole_fill_radius, 10)?;
    }
    Ok(CompoundOutput {
        volume,
        coverage,
        all_pixels_excluded: !any,
    })
}

/// One hole-filling pass: each uncovered voxel with at least one covered
/// voxel within the Chebyshev `radius` takes the mean of those neighbors.
/// Covered voxels are never modified. Returns the filled volume and its
/// updated coverage.
pub fn fill_holes(
    vol: &VoxelVolume,
    coverage: &VoxelVolume,
    radius: usize,
) -> Result<(VoxelVolume, VoxelVolume)> {
    if vol.dims != coverage.dims {
        return Err(Error::DimMismatch(format!(
            "volume dims {:?} vs coverage dims {:?}",
            vol.dims, coverage.dims
        )));
    }
    let [nx, ny, nz] = vol.dims;
    let r = radius as i64;
    let mut data = vol.data.clone();
    let mut cov = coverage.data.clone();
    let plane = nx * ny;

    let filled: Vec<Option<f32>> = parallel::map_indexed(nz, |z| {
        let mut out: Vec<Option<f32>> = vec![None; plane];
        for y in 0..ny {
            for x in 0..nx {
                let lin = x + nx * y;
                if coverage.data[vol.index(x, y, z)] != 0.0 {
                    continue;
                }
                let mut s = 0.0f64;
                let mut c = 0u32;
                for dz in -r..=r {
                    let zz = z as i64 + dz;
                    if zz < 0 || zz >= nz as i64 {
                        continue;
                    }
                    for dy in -r..=r {
                        let yy = y as i64 + dy;
                        if yy < 0 || yy >= ny as i64 {
                            continue;
                        }
                        for dx in -r..=r {
                            let xx = x as i64 + dx;
                            if xx < 0 || xx >= nx as i64 {
                                continue;
                            }
                            let i = vol.index(xx as usize, yy as usize, zz as usize);
                            if coverage.data[i] != 0.0 {
                                s += vol.data[i] as f64;
                                c += 1;
                            }
                        }
                    }
                }
                if c > 0 {
                    out[lin] = Some((s / c as f64) as f32);
                }
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();

    for (i, f) in filled.iter().enumerate() {
        if let Some(v) = f {
            data[i] = *v;
            cov[i] = 1.0;
        }
    }
    let out_vol = VoxelVolume::new(vol.dims, vol.spacing, vol.origin, data, vol.kind)?;
    let out_cov = VoxelVolume::new(vol.dims, vol.spacing, vol.origin, cov, VolumeKind::Label)?;
    Ok((out_vol, out_cov))
}

/// Repeats [`fill_holes`] until no voxel changes or `max_passes` is reached.
pub fn fill_holes_to_fixpoint(
    vol: &VoxelVolume,
    coverage: &VoxelVolume,
    radius: usize,
    max_passes: usize,
) -> Result<VoxelVolume> {
    let mut v = vol.clone();
    let mut c = coverage.clone();
    for _ in 0..max_passes {
        let before: f64 = c.data.iter().map(|&x| x as f64).sum();
        let (nv, nc) = fill_holes(&v, &c, radius)?;
        let after: f64 = nc.data.iter().map(|&x| x as f64).sum();
        v = nv;
        c = nc;
        if after == before {
            break;
        }
    }
    Ok(v)
}

// ── Frame-stream files ──────────────────────────────────────────────────────
//
// A frame stream is a directory with an `index.txt` (one line per frame:
// image filename, 16 pose entries row-major, pixel spacing su sv) plus the
// referenced 2D images in MetaImage format with NDims=2.

pub fn read_frame_stream(dir: &Path) -> Result<Vec<TrackedFrame>> {
    let index_path = dir.join("index.txt");
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let mut frames = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 19 {
            return Err(Error::MalformedHeader {
                path: index_path.clone(),
                reason: format!(
                    "line {}: expected 19 fields (image, 16 pose, su, sv), got {}",
                    lineno + 1,
                    tokens.len()
                ),
            });
        }
        let parse = |t: &str| -> Result<f64> {
            t.parse().map_err(|_| Error::MalformedHeader {
                path: index_path.clone(),
                reason: format!("line {}: bad number {t}", lineno + 1),
            })
        };
        let mut pose = [[0.0f64; 4]; 4];
        for i in 0..16 {
            pose[i / 4][i % 4] = parse(tokens[1 + i])?;
        }
        let pixel_spacing = [parse(tokens[17])?, parse(tokens[18])?];
        let img = read_volume(&dir.join(tokens[0]))?;
        if img.dims[2] != 1 {
            return Err(Error::DimMismatch(format!(
                "frame image {} must be 2D, got dims {:?}",
                tokens[0], img.dims
            )));
        }
        let frame = TrackedFrame {
            pixels: img.data,
            height: img.dims[1],
            width: img.dims[0],
            pixel_spacing,
            pose,
        };
        frame.validate()?;
        frames.push(frame);
    }
    if frames.is_empty() {
        return Err(Error::EmptyFrames);
    }
    Ok(frames)
}

pub fn write_frame_stream(frames: &[TrackedFrame], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = String::new();
    for (i, frame) in frames.iter().enumerate() {
        let name = format!("frame_{i:04}.mhd");
        let img = VoxelVolume::new(
            [frame.width, frame.height, 1],
            [frame.pixel_spacing[0], frame.pixel_spacing[1], 1.0],
            [0.0; 3],
            frame.pixels.clone(),
            VolumeKind::Intensity,
        )?;
        crate::volume::write_volume(&img, &dir.join(&name))?;
        index.push_str(&name);
        for row in &frame.pose {
            for v in row {
                index.push_str(&format!(" {v}"));
            }
        }
        index.push_str(&format!(
            " {} {}\n",
            frame.pixel_spacing[0], frame.pixel_spacing[1]
        ));
    }
    crate::volume::atomic_write(&dir.join("index.txt"), index.as_bytes())
}

/// Rotation by `angle_deg` about the given axis (0=x, 1=y, 2=z) with
/// translation `t`, as a rigid pose matrix.
pub fn rigid_pose(axis: usize, angle_deg: f64, t: [f64; 3]) -> [[f64; 4]; 4] {
    let a = angle_deg.to_radians();
    let (s, c) = a.sin_cos();
    let mut r = [[0.0; 4]; 4];
    match axis {
        0 => {
            r[0][0] = 1.0;
            r[1][1] = c;
            r[1][2] = -s;
            r[2][1] = s;
            r[2][2] = c;
        }
        1 => {
            r[0][0] = c;
            r[0][2] = s;
            r[1][1] = 1.0;
            r[2][0] = -s;
            r[2][2] = c;
        }
        _ => {
            r[0][0] = c;
            r[0][1] = -s;
            r[1][0] = s;
            r[1][1] = c;
            r[2][2] = 1.0;
        }
    }
    for i in 0..3 {
        r[i][3] = t[i];
    }
    r[3] = [0.0, 0.0, 0.0, 1.0];
    r
}

pub const IDENTITY_POSE: [[f64; 4]; 4] = [
    [1.0, 0.0, 0.0, 0.0],
    [0.0, 1.0, 0.0, 0.0],
    [0.0, 0.0, 1.0, 0.0],
    [0.0, 0.0, 0.0, 1.0],
];

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_frame(w: usize, h: usize, value: f32, z: f64) -> TrackedFrame {
        TrackedFrame {
            pixels: vec![value; w * h],
            height: h,
            width: w,
            pixel_spacing: [1.0, 1.0],
            pose: rigid_pose(2, 0.0, [0.0, 0.0, z]),
        }
    }

    #[test]
    fn bounds_single_slice() {
        let frames = vec![flat_frame(100, 100, 1.0, 0.0)];
        let (_, dims) = fit_bounds(&frames, 1.0).unwrap();
        assert_eq!(dims, [100, 100, 1]);
    }

    #[test]
    fn bounds_two_parallel_frames() {
        let frames = vec![flat_frame(100, 100, 1.0, 0.0), flat_frame(100, 100, 1.0, 9.0)];
        let (_, dims) = fit_bounds(&frames, 1.0).unwrap();
        assert_eq!(dims, [100, 100, 10]);
    }

    #[test]
    fn bounds_rotation_swaps_axes() {
        let mut frame = flat_frame(100, 50, 1.0, 0.0);
        frame.pose = rigid_pose(0, 90.0, [0.0, 0.0, 0.0]);
        let (_, dims) = fit_bounds(&[frame], 1.0).unwrap();
        // the v extent (50 px) moves from y to z
        assert_eq!(dims[0], 100);
        assert_eq!(dims[2], 50);
        assert_eq!(dims[1], 1);
    }

    #[test]
    fn bounds_empty_is_error() {
        assert!(matches!(fit_bounds(&[], 1.0), Err(Error::EmptyFrames)));
    }

    #[test]
    fn identity_stacking_is_lossless() {
        let frames: Vec<TrackedFrame> = (0..20)
            .map(|z| {
                let mut f = flat_frame(10, 10, 0.0, z as f64);
                for (i, p) in f.pixels.iter_mut().enumerate() {
                    *p = (z * 100 + i) as f32;
                }
                f
            })
            .collect();
        let out = compound(&frames, &CompoundConfig::default()).unwrap();
        assert_eq!(out.volume.dims, [10, 10, 20]);
        assert!(out.coverage.data.iter().all(|&c| c == 1.0));
        for z in 0..20 {
            for y in 0..10 {
                for x in 0..10 {
                    assert_eq!(out.volume.at(x, y, z), (z * 100 + y * 10 + x) as f32);
                }
            }
        }
    }

    #[test]
    fn coincident_frames_average() {
        let frames = vec![flat_frame(4, 4, 10.0, 0.0), flat_frame(4, 4, 20.0, 0.0)];
        let out = compound(&frames, &CompoundConfig::default()).unwrap();
        for (&v, &c) in out.volume.data.iter().zip(&out.coverage.data) {
            assert_eq!(c, 1.0);
            assert_eq!(v, 15.0);
        }
    }

    #[test]
    fn permutation_invariance() {
        let mut frames = vec![
            flat_frame(6, 6, 3.0, 0.0),
            flat_frame(6, 6, 5.0, 0.5),
            flat_frame(6, 6, 9.0, 2.0),
        ];
        let cfg = CompoundConfig {
            bounds_mode: BoundsMode::Explicit {
                origin: [-0.5, -0.5, -0.5],
                dims: [6, 6, 3],
            },
            ..Default::default()
        };
        let a = compound(&frames, &cfg).unwrap();
        frames.reverse();
        let b = compound(&frames, &cfg).unwrap();
        for (x, y) in a.volume.data.iter().zip(&b.volume.data) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn explicit_bounds_excluding_everything_flags_warning() {
        let frames = vec![flat_frame(4, 4, 1.0, 0.0)];
        let cfg = CompoundConfig {
            bounds_mode: BoundsMode::Explicit {
                origin: [1000.0, 1000.0, 1000.0],
                dims: [4, 4, 4],
            },
            ..Default::default()
        };
        let out = compound(&frames, &cfg).unwrap();
        assert!(out.all_pixels_excluded);
        assert!(out.volume.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fill_holes_identity_when_dense() {
        let vol = VoxelVolume::zeros([4, 4, 4], VolumeKind::Intensity);
        let mut cov = VoxelVolume::zeros([4, 4, 4], VolumeKind::Label);
        cov.data.fill(1.0);
        let (out, _) = fill_holes(&vol, &cov, 1).unwrap();
        assert_eq!(out.data, vol.data);
    }

    #[test]
    fn fill_single_hole() {
        let mut vol = VoxelVolume::zeros([3, 3, 3], VolumeKind::Intensity);
        vol.data.fill(7.0);
        let mut cov = VoxelVolume::zeros([3, 3, 3], VolumeKind::Label);
        cov.data.fill(1.0);
        let c = vol.index(1, 1, 1);
        vol.data[c] = 0.0;
        cov.data[c] = 0.0;
        let (out, newcov) = fill_holes(&vol, &cov, 1).unwrap();
        assert_eq!(out.data[c], 7.0);
        assert_eq!(newcov.data[c], 1.0);
    }

    #[test]
    fn checkerboard_fills_in_one_pass() {
        let dims = [8, 8, 8];
        let mut vol = VoxelVolume::zeros(dims, VolumeKind::Intensity);
        let mut cov = VoxelVolume::zeros(dims, VolumeKind::Label);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    if (x + y + z) % 2 == 0 {
                        let i = vol.index(x, y, z);
                        vol.data[i] = 4.0;
                        cov.data[i] = 1.0;
                    }
                }
            }
        }
        let (out, newcov) = fill_holes(&vol, &cov, 1).unwrap();
        assert!(newcov.data.iter().all(|&c| c == 1.0));
        assert!(out.data.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn frame_stream_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![flat_frame(5, 4, 2.5, 0.0), flat_frame(5, 4, 1.5, 3.0)];
        write_frame_stream(&frames, dir.path()).unwrap();
        let back = read_frame_stream(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].pixels, frames[0].pixels);
        assert_eq!(back[1].pose, frames[1].pose);
        assert_eq!(back[0].pixel_spacing, frames[0].pixel_spacing);
    }

    #[test]
    fn invalid_rotation_rejected() {
        let mut f = flat_frame(2, 2, 1.0, 0.0);
        f.pose[0][0] = 2.0;
        assert!(matches!(f.validate(), Err(Error::InvalidPose(_))));
    }
}

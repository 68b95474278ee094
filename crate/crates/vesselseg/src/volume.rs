//! Voxel-grid type, MetaImage-compatible disk format, and preprocessing.
//!
//! Volumes are stored x-fastest (index = x + nx*(y + ny*z)) as `f32`, which is
//! also the on-disk element order. Intensity volumes serialize as MET_FLOAT,
//! label volumes as MET_UCHAR; both little-endian, so round-trips are
//! bit-exact.

use crate::error::{Error, Result};
use crate::parallel;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Intensity,
    Label,
}

#[derive(Debug, Clone)]
pub struct VoxelVolume {
    pub dims: [usize; 3],
    /// mm per voxel, strictly positive.
    pub spacing: [f64; 3],
    /// mm, world position of voxel (0,0,0).
    pub origin: [f64; 3],
    /// x-fastest scalar data, length = nx*ny*nz.
    pub data: Vec<f32>,
    pub kind: VolumeKind,
    /// Unknown header keys preserved across read/write round-trips.
    pub extra_header: Vec<(String, String)>,
}

impl VoxelVolume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
        kind: VolumeKind,
    ) -> Result<Self> {
        let vol = VoxelVolume {
            dims,
            spacing,
            origin,
            data,
            kind,
            extra_header: Vec::new(),
        };
        vol.validate()?;
        Ok(vol)
    }

    /// All-zero volume with unit spacing at the world origin.
    pub fn zeros(dims: [usize; 3], kind: VolumeKind) -> Self {
        VoxelVolume {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
            kind,
            extra_header: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume("zero dimension".into()));
        }
        if self.data.len() != self.len() {
            return Err(Error::InvalidVolume(format!(
                "data length {} does not match dims {:?}",
                self.data.len(),
                self.dims
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-positive or non-finite spacing {:?}",
                self.spacing
            )));
        }
        if self.kind == VolumeKind::Label {
            for &v in &self.data {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::NonBinaryLabel(v));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Trilinear sample at a continuous voxel coordinate (units of voxels,
    /// voxel centers at integers). Out-of-range coordinates clamp to the edge.
    pub fn sample_trilinear(&self, pos: [f64; 3]) -> f64 {
        let [nx, ny, nz] = self.dims;
        let clampf = |p: f64, n: usize| p.clamp(0.0, (n - 1) as f64);
        let x = clampf(pos[0], nx);
        let y = clampf(pos[1], ny);
        let z = clampf(pos[2], nz);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let z0 = z.floor() as usize;
        let x1 = (x0 + 1).min(nx - 1);
        let y1 = (y0 + 1).min(ny - 1);
        let z1 = (z0 + 1).min(nz - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let fz = z - z0 as f64;
        let v = |xi, yi, zi| self.at(xi, yi, zi) as f64;
        let c00 = v(x0, y0, z0) * (1.0 - fx) + v(x1, y0, z0) * fx;
        let c10 = v(x0, y1, z0) * (1.0 - fx) + v(x1, y1, z0) * fx;
        let c01 = v(x0, y0, z1) * (1.0 - fx) + v(x1, y0, z1) * fx;
        let c11 = v(x0, y1, z1) * (1.0 - fx) + v(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }

    /// Nearest-neighbor sample; out-of-range coordinates clamp to the edge.
    pub fn sample_nearest(&self, pos: [f64; 3]) -> f32 {
        let idx = |p: f64, n: usize| (p.round().max(0.0) as usize).min(n - 1);
        self.at(
            idx(pos[0], self.dims[0]),
            idx(pos[1], self.dims[1]),
            idx(pos[2], self.dims[2]),
        )
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Resamples by a factor in (0, 1]: trilinear for intensity, nearest-neighbor
/// for labels. New dims are round-half-up of old*factor with a floor of 1;
/// spacing is rescaled so the physical extent is preserved.
pub fn resample(vol: &VoxelVolume, factor: f64) -> Result<VoxelVolume> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::InvalidResampleFactor(factor));
    }
    let new_dims: [usize; 3] = std::array::from_fn(|a| {
        round_half_up(vol.dims[a] as f64 * factor).max(1)
    });
    if new_dims == vol.dims {
        return Ok(vol.clone());
    }
    let scale: [f64; 3] = std::array::from_fn(|a| vol.dims[a] as f64 / new_dims[a] as f64);
    let new_spacing: [f64; 3] = std::array::from_fn(|a| vol.spacing[a] * scale[a]);
    let [nx, ny, _] = new_dims;
    let n = new_dims[0] * new_dims[1] * new_dims[2];
    let mut data = vec![0.0f32; n];
    let kind = vol.kind;
    // one xy-plane per chunk
    parallel::for_each_chunk_mut(&mut data, nx * ny, |z, plane| {
        for y in 0..ny {
            for x in 0..nx {
                let pos: [f64; 3] = std::array::from_fn(|a| {
                    let i = [x, y, z][a] as f64;
                    (i + 0.5) * scale[a] - 0.5
                });
                plane[x + nx * y] = match kind {
                    VolumeKind::Intensity => vol.sample_trilinear(pos) as f32,
                    VolumeKind::Label => vol.sample_nearest(pos),
                };
            }
        }
    });
    let mut out = VoxelVolume::new(new_dims, new_spacing, vol.origin, data, vol.kind)?;
    out.extra_header = vol.extra_header.clone();
    Ok(out)
}

/// 3x3x3 median filter with edge replication. Intensity volumes only.
pub fn median_filter3(vol: &VoxelVolume) -> Result<VoxelVolume> {
    if vol.kind != VolumeKind::Intensity {
        return Err(Error::LabelNotSupported);
    }
    let [nx, ny, nz] = vol.dims;
    let mut data = vec![0.0f32; vol.len()];
    parallel::for_each_chunk_mut(&mut data, nx * ny, |z, plane| {
        let mut window = [0.0f32; 27];
        for y in 0..ny {
            for x in 0..nx {
                let mut k = 0;
                for dz in -1i64..=1 {
                    let zz = (z as i64 + dz).clamp(0, nz as i64 - 1) as usize;
                    for dy in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, ny as i64 - 1) as usize;
                        for dx in -1i64..=1 {
                            let xx = (x as i64 + dx).clamp(0, nx as i64 - 1) as usize;
                            window[k] = vol.at(xx, yy, zz);
                            k += 1;
                        }
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).unwrap());
                plane[x + nx * y] = window[13];
            }
        }
    });
    let mut out = VoxelVolume::new(vol.dims, vol.spacing, vol.origin, data, vol.kind)?;
    out.extra_header = vol.extra_header.clone();
    Ok(out)
}

/// Zero-mean unit-variance normalization (population SD). Errors on
/// zero-variance input. With `mean_only`, subtracts the mean without scaling.
pub fn mean_normalize(vol: &VoxelVolume, mean_only: bool) -> Result<VoxelVolume> {
    if vol.kind != VolumeKind::Intensity {
        return Err(Error::LabelNotSupported);
    }
    let n = vol.len() as f64;
    let mean = vol.data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = vol
        .data
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let (shift, scale) = if mean_only {
        (mean, 1.0)
    } else {
        if var <= 0.0 {
            return Err(Error::DegenerateNormalization);
        }
        (mean, 1.0 / var.sqrt())
    };
    let data: Vec<f32> = vol
        .data
        .iter()
        .map(|&v| ((v as f64 - shift) * scale) as f32)
        .collect();
    let mut out = VoxelVolume::new(vol.dims, vol.spacing, vol.origin, data, vol.kind)?;
    out.extra_header = vol.extra_header.clone();
    Ok(out)
}

/// Pads every face with `margin` zero voxels; the origin shifts by
/// -margin*spacing so world coordinates of the original data are unchanged.
pub fn pad(vol: &VoxelVolume, margin: usize) -> Result<VoxelVolume> {
    if margin == 0 {
        return Ok(vol.clone());
    }
    let [nx, ny, nz] = vol.dims;
    let new_dims = [nx + 2 * margin, ny + 2 * margin, nz + 2 * margin];
    let mut data = vec![0.0f32; new_dims[0] * new_dims[1] * new_dims[2]];
    let row = nx;
    for z in 0..nz {
        for y in 0..ny {
            let src = vol.index(0, y, z);
            let dst = (margin) + new_dims[0] * ((y + margin) + new_dims[1] * (z + margin));
            data[dst..dst + row].copy_from_slice(&vol.data[src..src + row]);
        }
    }
    let origin: [f64; 3] = std::array::from_fn(|a| vol.origin[a] - margin as f64 * vol.spacing[a]);
    let mut out = VoxelVolume::new(new_dims, vol.spacing, origin, data, vol.kind)?;
    out.extra_header = vol.extra_header.clone();
    Ok(out)
}

/// Removes `margin` voxels from every face; inverse of [`pad`].
pub fn crop_center(vol: &VoxelVolume, margin: usize) -> Result<VoxelVolume> {
    if margin == 0 {
        return Ok(vol.clone());
    }
    let [nx, ny, nz] = vol.dims;
    if nx <= 2 * margin || ny <= 2 * margin || nz <= 2 * margin {
        return Err(Error::DimMismatch(format!(
            "cannot crop margin {margin} from dims {:?}",
            vol.dims
        )));
    }
    let new_dims = [nx - 2 * margin, ny - 2 * margin, nz - 2 * margin];
    let mut data = Vec::with_capacity(new_dims[0] * new_dims[1] * new_dims[2]);
    for z in 0..new_dims[2] {
        for y in 0..new_dims[1] {
            let src = vol.index(margin, y + margin, z + margin);
            data.extend_from_slice(&vol.data[src..src + new_dims[0]]);
        }
    }
    let origin: [f64; 3] = std::array::from_fn(|a| vol.origin[a] + margin as f64 * vol.spacing[a]);
    let mut out = VoxelVolume::new(new_dims, vol.spacing, origin, data, vol.kind)?;
    out.extra_header = vol.extra_header.clone();
    Ok(out)
}

/// The standard preparation chain: resample, despeckle, normalize, pad.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PreprocessConfig {
    pub resample_factor: f64,
    pub median_filter: bool,
    pub normalize: bool,
    /// Subtract the mean without dividing by the standard deviation.
    pub mean_only: bool,
    /// Zero voxels added to every face.
    pub pad_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            resample_factor: 0.4,
            median_filter: true,
            normalize: true,
            mean_only: false,
            pad_margin: 32,
        }
    }
}

/// Applies the full chain. Labels skip the intensity-only stages (median
/// filter and normalization) but share the geometry changes, so a
/// preprocessed label stays aligned with its preprocessed image.
pub fn preprocess(vol: &VoxelVolume, cfg: &PreprocessConfig) -> Result<VoxelVolume> {
    let mut v = resample(vol, cfg.resample_factor)?;
    if v.kind == VolumeKind::Intensity {
        if cfg.median_filter {
            v = median_filter3(&v)?;
        }
        if cfg.normalize {
            v = mean_normalize(&v, cfg.mean_only)?;
        }
    }
    pad(&v, cfg.pad_margin)
}

// ── MetaImage-compatible I/O ────────────────────────────────────────────────

const KNOWN_KEYS: &[&str] = &[
    "ObjectType",
    "NDims",
    "DimSize",
    "ElementSpacing",
    "Offset",
    "ElementType",
    "ElementDataFile",
];

/// Writes `vol` as a MetaImage header/raw pair. `path` names the header; the
/// raw file sits next to it with extension `.raw`.
pub fn write_volume(vol: &VoxelVolume, path: &Path) -> Result<()> {
    vol.validate()?;
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("volume data".into()));
    }
    let raw_path = path.with_extension("raw");
    let raw_name = raw_path
        .file_name()
        .ok_or_else(|| Error::InvalidVolume(format!("bad output path {}", path.display())))?
        .to_string_lossy()
        .into_owned();

    let element_type = match vol.kind {
        VolumeKind::Intensity => "MET_FLOAT",
        VolumeKind::Label => "MET_UCHAR",
    };
    let mut header = String::new();
    let _ = writeln!(header, "ObjectType = Image");
    let _ = writeln!(header, "NDims = 3");
    let _ = writeln!(
        header,
        "DimSize = {} {} {}",
        vol.dims[0], vol.dims[1], vol.dims[2]
    );
    let _ = writeln!(
        header,
        "ElementSpacing = {} {} {}",
        vol.spacing[0], vol.spacing[1], vol.spacing[2]
    );
    let _ = writeln!(
        header,
        "Offset = {} {} {}",
        vol.origin[0], vol.origin[1], vol.origin[2]
    );
    let _ = writeln!(header, "ElementType = {element_type}");
    for (k, v) in &vol.extra_header {
        let _ = writeln!(header, "{k} = {v}");
    }
    let _ = writeln!(header, "ElementDataFile = {raw_name}");

    let raw: Vec<u8> = match vol.kind {
        VolumeKind::Intensity => vol
            .data
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        VolumeKind::Label => vol.data.iter().map(|&v| v as u8).collect(),
    };
    atomic_write(path, header.as_bytes())?;
    atomic_write(&raw_path, &raw)?;
    Ok(())
}

/// Writes via a temp file then renames, so readers never see partial output.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VoxelVolume> {
    let header = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut origin = [0.0f64; 3];
    let mut element_type: Option<String> = None;
    let mut data_file: Option<String> = None;
    let mut ndims_2d = false;
    let mut extra = Vec::new();

    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };

    for line in header.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(&format!("line without '=': {line}")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(malformed(&format!("ObjectType {value}, expected Image")));
                }
            }
            "NDims" => match value {
                "3" => {}
                "2" => ndims_2d = true,
                _ => return Err(malformed(&format!("NDims {value}, expected 2 or 3"))),
            },
            "DimSize" => {
                let parts: Vec<usize> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| malformed("bad DimSize")))
                    .collect::<Result<_>>()?;
                dims = Some(match parts.len() {
                    3 => [parts[0], parts[1], parts[2]],
                    2 => [parts[0], parts[1], 1],
                    _ => return Err(malformed("DimSize must have 2 or 3 entries")),
                });
            }
            "ElementSpacing" => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| malformed("bad ElementSpacing")))
                    .collect::<Result<_>>()?;
                match parts.len() {
                    3 => spacing = [parts[0], parts[1], parts[2]],
                    2 => spacing = [parts[0], parts[1], 1.0],
                    _ => return Err(malformed("ElementSpacing must have 2 or 3 entries")),
                }
            }
            "Offset" => {
                let parts: Vec<f64> = value
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| malformed("bad Offset")))
                    .collect::<Result<_>>()?;
                match parts.len() {
                    3 => origin = [parts[0], parts[1], parts[2]],
                    2 => origin = [parts[0], parts[1], 0.0],
                    _ => return Err(malformed("Offset must have 2 or 3 entries")),
                }
            }
            "ElementType" => element_type = Some(value.to_string()),
            "ElementDataFile" => data_file = Some(value.to_string()),
            _ => extra.push((key.to_string(), value.to_string())),
        }
    }
    let _ = ndims_2d;

    let dims = dims.ok_or_else(|| malformed("missing DimSize"))?;
    let element_type = element_type.ok_or_else(|| malformed("missing ElementType"))?;
    let data_file = data_file.ok_or_else(|| malformed("missing ElementDataFile"))?;
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(malformed(&format!("non-positive spacing {spacing:?}")));
    }
    let kind = match element_type.as_str() {
        "MET_FLOAT" => VolumeKind::Intensity,
        "MET_UCHAR" => VolumeKind::Label,
        other => return Err(malformed(&format!("unsupported ElementType {other}"))),
    };

    let raw_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&data_file);
    let raw = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = dims[0] * dims[1] * dims[2];
    let elem_size = match kind {
        VolumeKind::Intensity => 4,
        VolumeKind::Label => 1,
    };
    if raw.len() != n * elem_size {
        return Err(Error::RawSizeMismatch {
            path: raw_path,
            expected: n * elem_size,
            actual: raw.len(),
        });
    }
    let data: Vec<f32> = match kind {
        VolumeKind::Intensity => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        VolumeKind::Label => raw.iter().map(|&b| b as f32).collect(),
    };
    let mut vol = VoxelVolume::new(dims, spacing, origin, data, kind)?;
    vol.extra_header = extra
        .into_iter()
        .filter(|(k, _)| !KNOWN_KEYS.contains(&k.as_str()))
        .collect();
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn seq_volume(dims: [usize; 3]) -> VoxelVolume {
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|i| i as f32).collect();
        VoxelVolume::new(dims, [1.0; 3], [0.0; 3], data, VolumeKind::Intensity).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.mhd");
        let mut vol = seq_volume([4, 4, 4]);
        vol.spacing = [0.5, 1.25, 2.0];
        vol.origin = [-1.0, 3.0, 0.25];
        vol.extra_header
            .push(("TransformMatrix".into(), "1 0 0 0 1 0 0 0 1".into()));
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.spacing, vol.spacing);
        assert_eq!(back.origin, vol.origin);
        assert_eq!(back.data, vol.data);
        assert_eq!(back.extra_header, vol.extra_header);
    }

    #[test]
    fn short_raw_file_is_size_mismatch() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("vol.mhd");
        let header = "ObjectType = Image\nNDims = 3\nDimSize = 512 400 256\n\
                      ElementSpacing = 1 1 1\nElementType = MET_FLOAT\n\
                      ElementDataFile = vol.raw\n";
        fs::write(&path, header).unwrap();
        fs::write(dir.path().join("vol.raw"), vec![0u8; 128]).unwrap();
        match read_volume(&path) {
            Err(Error::RawSizeMismatch { expected, .. }) => {
                assert_eq!(expected, 512 * 400 * 256 * 4);
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_label_rejected_on_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("lab.mhd");
        let header = "ObjectType = Image\nNDims = 3\nDimSize = 2 1 1\n\
                      ElementSpacing = 1 1 1\nElementType = MET_UCHAR\n\
                      ElementDataFile = lab.raw\n";
        fs::write(&path, header).unwrap();
        fs::write(dir.path().join("lab.raw"), [1u8, 2u8]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::NonBinaryLabel(v)) if v == 2.0));
    }

    #[test]
    fn nan_voxel_rejected_before_write() {
        let dir = tempdir().unwrap();
        let mut vol = seq_volume([2, 2, 2]);
        vol.data[3] = f32::NAN;
        assert!(matches!(
            write_volume(&vol, &dir.path().join("v.mhd")),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn resample_dims_match_published_arithmetic() {
        // 512x400x256 at 40% -> 205x160x102 by round-half-up
        let new_dims: [usize; 3] =
            std::array::from_fn(|a| round_half_up([512.0, 400.0, 256.0][a] * 0.4));
        assert_eq!(new_dims, [205, 160, 102]);
    }

    #[test]
    fn resample_factor_one_is_identity() {
        let vol = seq_volume([5, 4, 3]);
        let out = resample(&vol, 1.0).unwrap();
        assert_eq!(out.data, vol.data);
        assert_eq!(out.spacing, vol.spacing);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let mut vol = seq_volume([10, 10, 10]);
        vol.data.fill(7.25);
        let out = resample(&vol, 0.4).unwrap();
        assert_eq!(out.dims, [4, 4, 4]);
        assert!(out.data.iter().all(|&v| v == 7.25));
    }

    #[test]
    fn resample_rejects_bad_factor() {
        let vol = seq_volume([4, 4, 4]);
        assert!(resample(&vol, 0.0).is_err());
        assert!(resample(&vol, 1.5).is_err());
    }

    #[test]
    fn resample_label_stays_binary() {
        let n = 20 * 20 * 20;
        let data: Vec<f32> = (0..n).map(|i| (i % 3 == 0) as u8 as f32).collect();
        let vol = VoxelVolume::new([20, 20, 20], [1.0; 3], [0.0; 3], data, VolumeKind::Label)
            .unwrap();
        let out = resample(&vol, 0.4).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn median_removes_impulse() {
        let mut vol = VoxelVolume::zeros([5, 5, 5], VolumeKind::Intensity);
        let c = vol.index(2, 2, 2);
        vol.data[c] = 100.0;
        let out = median_filter3(&vol).unwrap();
        assert_eq!(out.data[c], 0.0);
    }

    #[test]
    fn median_of_distinct_27() {
        let vol = seq_volume([3, 3, 3]); // values 0..27
        let out = median_filter3(&vol).unwrap();
        assert_eq!(out.at(1, 1, 1), 13.0); // median of 0..=26
    }

    #[test]
    fn median_constant_is_identity() {
        let mut vol = seq_volume([4, 4, 4]);
        vol.data.fill(3.5);
        let out = median_filter3(&vol).unwrap();
        assert_eq!(out.data, vol.data);
    }

    #[test]
    fn median_rejects_label() {
        let vol = VoxelVolume::zeros([3, 3, 3], VolumeKind::Label);
        assert!(matches!(median_filter3(&vol), Err(Error::LabelNotSupported)));
    }

    #[test]
    fn normalize_two_point() {
        let data = vec![0.0, 2.0, 0.0, 2.0];
        let vol =
            VoxelVolume::new([4, 1, 1], [1.0; 3], [0.0; 3], data, VolumeKind::Intensity).unwrap();
        let out = mean_normalize(&vol, false).unwrap();
        assert_eq!(out.data, vec![-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let vol = seq_volume([6, 5, 4]);
        let once = mean_normalize(&vol, false).unwrap();
        let twice = mean_normalize(&once, false).unwrap();
        for (a, b) in once.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_constant_is_degenerate() {
        let mut vol = seq_volume([3, 3, 3]);
        vol.data.fill(5.0);
        assert!(matches!(
            mean_normalize(&vol, false),
            Err(Error::DegenerateNormalization)
        ));
    }

    #[test]
    fn normalize_affine_equivariant() {
        let vol = seq_volume([5, 5, 5]);
        let mut scaled = vol.clone();
        for v in &mut scaled.data {
            *v = 3.0 * *v + 11.0;
        }
        let a = mean_normalize(&vol, false).unwrap();
        let b = mean_normalize(&scaled, false).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn pad_zero_margin_is_identity() {
        let vol = seq_volume([3, 4, 5]);
        let out = pad(&vol, 0).unwrap();
        assert_eq!(out.data, vol.data);
    }

    #[test]
    fn pad_dims_and_origin() {
        let vol = seq_volume([205, 1, 1]);
        let out = pad(&vol, 32).unwrap();
        assert_eq!(out.dims, [269, 65, 65]);
        assert_eq!(out.origin, [-32.0, -32.0, -32.0]);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let vol = seq_volume([4, 5, 6]);
        let out = crop_center(&pad(&vol, 3).unwrap(), 3).unwrap();
        assert_eq!(out.data, vol.data);
        assert_eq!(out.origin, vol.origin);
    }

    #[test]
    fn pad_label_stays_binary() {
        let data = vec![1.0; 8];
        let vol =
            VoxelVolume::new([2, 2, 2], [1.0; 3], [0.0; 3], data, VolumeKind::Label).unwrap();
        let out = pad(&vol, 2).unwrap();
        out.validate().unwrap();
        assert_eq!(out.dims, [6, 6, 6]);
    }
}

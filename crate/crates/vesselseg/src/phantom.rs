//! Synthetic vessel phantoms: a random branching tube tree rasterized as the
//! label, with a hypoechoic (darker-than-parenchyma) image under
//! multiplicative speckle noise.

use crate::error::{Error, Result};
use crate::parallel;
use crate::volume::{VolumeKind, VoxelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    /// Branching events in the tube tree.
    pub n_branches: usize,
    /// Trunk radius range in voxels.
    pub radius_range: [f64; 2],
    /// Relative vessel intensity (hypoechoic factor), in (0, 1).
    pub vessel_contrast: f64,
    /// SD of the multiplicative Gaussian speckle.
    pub speckle_sd: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [96, 96, 96],
            n_branches: 6,
            radius_range: [2.0, 6.0],
            vessel_contrast: 0.35,
            speckle_sd: 0.3,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let min_dim = *self.dims.iter().min().unwrap_or(&0);
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig("phantom dims must be positive".into()));
        }
        if self.radius_range[0] < 1.0
            || self.radius_range[1] < self.radius_range[0]
            || self.radius_range[1] >= min_dim as f64 / 4.0
        {
            return Err(Error::InvalidConfig(format!(
                "radius range {:?} must satisfy 1 <= lo <= hi < min(dims)/4",
                self.radius_range
            )));
        }
        if !(self.vessel_contrast > 0.0 && self.vessel_contrast < 1.0) {
            return Err(Error::InvalidConfig("vessel_contrast must be in (0, 1)".into()));
        }
        if self.speckle_sd < 0.0 {
            return Err(Error::InvalidConfig("speckle_sd must be >= 0".into()));
        }
        Ok(())
    }
}

/// One tube of the tree: a line segment with a radius, in voxel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct TubeSegment {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
}

impl TubeSegment {
    /// Distance from a point to the segment.
    pub fn distance(&self, p: [f64; 3]) -> f64 {
        let d: [f64; 3] = std::array::from_fn(|a| self.end[a] - self.start[a]);
        let w: [f64; 3] = std::array::from_fn(|a| p[a] - self.start[a]);
        let len2: f64 = d.iter().map(|v| v * v).sum();
        let t = if len2 > 0.0 {
            (w.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (0..3)
            .map(|a| (p[a] - (self.start[a] + t * d[a])).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

const RADIUS_DECAY: f64 = 0.8;
const MAX_BRANCH_ANGLE_DEG: f64 = 40.0;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    std::array::from_fn(|a| v[a] / n)
}

fn jitter_direction(dir: [f64; 3], max_angle_deg: f64, rng: &mut impl Rng) -> [f64; 3] {
    let angle = rng.gen_range(0.0..=max_angle_deg).to_radians();
    // random perpendicular via Gram-Schmidt on a random vector
    let mut p;
    loop {
        let r: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        let dot: f64 = r.iter().zip(&dir).map(|(a, b)| a * b).sum();
        p = std::array::from_fn(|a| r[a] - dot * dir[a]);
        let n: f64 = p.iter().map(|x: &f64| x * x).sum::<f64>();
        if n > 1e-6 {
            p = unit(p);
            break;
        }
    }
    let (s, c) = angle.sin_cos();
    unit(std::array::from_fn(|a| c * dir[a] + s * p[a]))
}

/// Grows the random tube tree for a given config and attempt.
pub fn generate_tree(cfg: &PhantomConfig, rng: &mut impl Rng) -> Vec<TubeSegment> {
    let dims_f: [f64; 3] = std::array::from_fn(|a| cfg.dims[a] as f64);
    let min_dim = dims_f.iter().cloned().fold(f64::INFINITY, f64::min);
    let margin = cfg.radius_range[1] + 1.0;

    // trunk enters from a random face center region, pointed inward
    let axis = rng.gen_range(0..3usize);
    let mut start: [f64; 3] =
        std::array::from_fn(|a| rng.gen_range(0.25 * dims_f[a]..0.75 * dims_f[a]));
    start[axis] = margin;
    let mut dir = [0.0; 3];
    dir[axis] = 1.0;
    let dir = jitter_direction(dir, 20.0, rng);
    let radius = rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]);

    let mut segments = Vec::new();
    let mut branch_budget = cfg.n_branches;
    // (start, dir, radius) work queue, grown depth-first
    let mut stack = vec![(start, dir, radius)];
    while let Some((s, d, r)) = stack.pop() {
        if r < 1.0 {
            continue;
        }
        let len = rng.gen_range(0.18 * min_dim..0.32 * min_dim);
        let mut e: [f64; 3] = std::array::from_fn(|a| s[a] + len * d[a]);
        let mut clipped = false;
        for a in 0..3 {
            if e[a] < margin || e[a] > dims_f[a] - margin {
                e[a] = e[a].clamp(margin, dims_f[a] - margin);
                clipped = true;
            }
        }
        segments.push(TubeSegment {
            start: s,
            end: e,
            radius: r,
        });
        if clipped || branch_budget == 0 {
            continue;
        }
        branch_budget -= 1;
        let child_r = r * RADIUS_DECAY;
        for _ in 0..2 {
            let child_dir = jitter_direction(d, MAX_BRANCH_ANGLE_DEG, rng);
            stack.push((e, child_dir, child_r));
        }
    }
    segments
}

/// Marks every voxel whose center lies within a segment radius.
pub fn rasterize_tree(segments: &[TubeSegment], dims: [usize; 3]) -> VoxelVolume {
    let [nx, ny, _] = dims;
    let mut data = vec![0.0f32; dims[0] * dims[1] * dims[2]];
    parallel::for_each_chunk_mut(&mut data, nx * ny, |z, plane| {
        for seg in segments {
            // per-plane bounding box keeps the scan local to the tube
            let r = seg.radius;
            let zf = z as f64;
            if zf < seg.start[2].min(seg.end[2]) - r || zf > seg.start[2].max(seg.end[2]) + r {
                continue;
            }
            let x0 = ((seg.start[0].min(seg.end[0]) - r).floor().max(0.0)) as usize;
            let x1 = ((seg.start[0].max(seg.end[0]) + r).ceil() as usize).min(nx - 1);
            let y0 = ((seg.start[1].min(seg.end[1]) - r).floor().max(0.0)) as usize;
            let y1 = ((seg.start[1].max(seg.end[1]) + r).ceil() as usize).min(ny - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if plane[x + nx * y] == 0.0
                        && seg.distance([x as f64, y as f64, zf]) <= r
                    {
                        plane[x + nx * y] = 1.0;
                    }
                }
            }
        }
    });
    let mut vol = VoxelVolume::zeros(dims, VolumeKind::Label);
    vol.data = data;
    vol
}

/// Generates an (image, label) phantom pair, deterministic per seed. Retries
/// with derived seeds until the label foreground fraction lands in
/// [0.5%, 15%], up to 10 attempts.
pub fn generate(cfg: &PhantomConfig) -> Result<(VoxelVolume, VoxelVolume)> {
    cfg.validate()?;
    let n = cfg.dims[0] * cfg.dims[1] * cfg.dims[2];
    for attempt in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(attempt.wrapping_mul(0x9E3779B97F4A7C15)));
        let segments = generate_tree(cfg, &mut rng);
        let label = rasterize_tree(&segments, cfg.dims);
        let foreground = label.data.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        if !(0.005..=0.15).contains(&foreground) {
            continue;
        }
        let mut image = VoxelVolume::zeros(cfg.dims, VolumeKind::Intensity);
        if cfg.speckle_sd > 0.0 {
            let normal = Normal::new(0.0, cfg.speckle_sd).unwrap();
            for (img, &lab) in image.data.iter_mut().zip(&label.data) {
                let base = if lab != 0.0 { cfg.vessel_contrast } else { 1.0 };
                let noise = (1.0 + normal.sample(&mut rng)).max(0.0);
                *img = (base * noise) as f32;
            }
        } else {
            for (img, &lab) in image.data.iter_mut().zip(&label.data) {
                *img = if lab != 0.0 { cfg.vessel_contrast as f32 } else { 1.0 };
            }
        }
        return Ok((image, label));
    }
    Err(Error::PhantomGeneration(format!(
        "foreground fraction out of [0.5%, 15%] after 10 attempts (seed {})",
        cfg.seed
    )))
}

//! Reduced-filter 3D U-Net: channel plan, initialization, forward pass,
//! tiled full-volume inference, and parameter serialization.
//!
//! The architecture follows the standard 3D U-Net layout (double conv per
//! level, channel doubling, 3 pooling levels, skip concatenation) with every
//! filter count divided by `filter_divisor` (8 by default, so the first conv
//! has 4 filters instead of 32). Convolutions are 3x3x3 with same padding,
//! so output spatial dims equal input dims; the head is a 1x1x1 conv with a
//! sigmoid for the single foreground class.

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::volume::{VolumeKind, VoxelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Filter counts of the unreduced network, in channel-plan order:
/// per encoder level (conv1_out, conv2_out), then the bottom.
const ORIGINAL_PLAN: [(usize, usize); 4] = [(32, 64), (64, 128), (128, 256), (256, 512)];
const LEVELS: usize = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct UNetConfig {
    /// Divides every filter count of the 32-base network. Must divide 32.
    pub filter_divisor: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            filter_divisor: 8,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_divisor == 0 || 32 % self.filter_divisor != 0 {
            return Err(Error::InvalidConfig(format!(
                "filter_divisor {} must divide 32 exactly",
                self.filter_divisor
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidConfig("channel counts must be positive".into()));
        }
        Ok(())
    }

    fn plan(&self) -> [(usize, usize); 4] {
        ORIGINAL_PLAN.map(|(a, b)| (a / self.filter_divisor, b / self.filter_divisor))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Named weight tensors in a fixed canonical order, plus the config that
/// determines their shapes.
#[derive(Debug, Clone)]
pub struct UNetParams {
    pub config: UNetConfig,
    pub tensors: Vec<NamedTensor>,
}

enum LayerKind {
    ConvWeight { cout: usize, cin: usize, k: usize },
    ConvBias { cout: usize },
    NormGain { c: usize },
    NormBias { c: usize },
    UpConvWeight { cin: usize, cout: usize },
}

/// Canonical (name, shape) list for a config.
fn layer_plan(cfg: &UNetConfig) -> Vec<(String, LayerKind)> {
    let plan = cfg.plan();
    let mut layers = Vec::new();
    let conv_block = |layers: &mut Vec<(String, LayerKind)>, prefix: &str, idx: usize, cin: usize, cout: usize, k: usize| {
        layers.push((
            format!("{prefix}.conv{idx}.weight"),
            LayerKind::ConvWeight { cout, cin, k },
        ));
        layers.push((format!("{prefix}.conv{idx}.bias"), LayerKind::ConvBias { cout }));
        layers.push((format!("{prefix}.norm{idx}.gain"), LayerKind::NormGain { c: cout }));
        layers.push((format!("{prefix}.norm{idx}.bias"), LayerKind::NormBias { c: cout }));
    };

    // encoder
    let mut cin = cfg.in_channels;
    for (level, &(a, b)) in plan.iter().take(LEVELS).enumerate() {
        let prefix = format!("enc{}", level + 1);
        conv_block(&mut layers, &prefix, 1, cin, a, 3);
        conv_block(&mut layers, &prefix, 2, a, b, 3);
        cin = b;
    }
    // bottom
    let (ba, bb) = plan[3];
    conv_block(&mut layers, "bottom", 1, cin, ba, 3);
    conv_block(&mut layers, "bottom", 2, ba, bb, 3);

    // decoder, top-down names dec3, dec2, dec1
    let mut up_in = bb;
    for level in (0..LEVELS).rev() {
        let skip = plan[level].1;
        let out = plan[level].1; // decoder convs settle on the level's skip width
        let prefix = format!("dec{}", level + 1);
        layers.push((
            format!("{prefix}.upconv.weight"),
            LayerKind::UpConvWeight {
                cin: up_in,
                cout: up_in,
            },
        ));
        conv_block(&mut layers, &prefix, 1, up_in + skip, out, 3);
        conv_block(&mut layers, &prefix, 2, out, out, 3);
        up_in = out;
    }
    // head: 1x1x1 conv + sigmoid
    layers.push((
        "head.weight".into(),
        LayerKind::ConvWeight {
            cout: cfg.out_channels,
            cin: up_in,
            k: 1,
        },
    ));
    layers.push((
        "head.bias".into(),
        LayerKind::ConvBias {
            cout: cfg.out_channels,
        },
    ));
    layers
}

fn layer_shape(kind: &LayerKind) -> Vec<usize> {
    match kind {
        LayerKind::ConvWeight { cout, cin, k } => vec![*cout, *cin, *k, *k, *k],
        LayerKind::ConvBias { cout } => vec![*cout],
        LayerKind::NormGain { c } | LayerKind::NormBias { c } => vec![*c],
        LayerKind::UpConvWeight { cin, cout } => vec![*cin, *cout, 2, 2, 2],
    }
}

/// He-uniform initialization of all weights from the seed; conv biases and
/// norm biases zero, norm gains one.
pub fn build(cfg: &UNetConfig, seed: u64) -> Result<UNetParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layer_plan(cfg)
        .into_iter()
        .map(|(name, kind)| {
            let shape = layer_shape(&kind);
            let n: usize = shape.iter().product();
            let data = match kind {
                LayerKind::ConvWeight { cin, k, .. } => {
                    let fan_in = (cin * k * k * k) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
                LayerKind::UpConvWeight { cin, .. } => {
                    let fan_in = (cin * 8) as f64;
                    let bound = (6.0 / fan_in).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..=bound)).collect()
                }
                LayerKind::ConvBias { .. } | LayerKind::NormBias { .. } => vec![0.0; n],
                LayerKind::NormGain { .. } => vec![1.0; n],
            };
            Ok(NamedTensor {
                name,
                tensor: Tensor::new(shape, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(UNetParams {
        config: cfg.clone(),
        tensors,
    })
}

impl UNetParams {
    pub fn index_of(&self, name: &str) -> usize {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    /// Indices of convolution weights (3x3x3, 1x1x1 and upconv), the tensors
    /// the L1 penalty applies to.
    pub fn conv_weight_indices(&self) -> Vec<usize> {
        self.tensors
            .iter()
            .enumerate()
            .filter(|(_, t)| t.name.ends_with("conv.weight") || t.name.ends_with(".weight") && t.tensor.shape.len() == 5)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One recorded forward pass: the tape, the sigmoid output, and the leaf ids
/// of every parameter (aligned with `UNetParams::tensors`).
pub struct ForwardPass {
    pub tape: Tape,
    pub output: VarId,
    pub param_ids: Vec<VarId>,
}

/// Runs the network on a [b, in_channels, x, y, z] patch. Spatial dims must
/// be divisible by 8 (2^3 pooling levels).
pub fn forward_pass(params: &UNetParams, patch: Tensor, trainable: bool) -> Result<ForwardPass> {
    if patch.shape.len() != 5 || patch.shape[1] != params.config.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "patch must be [b, {}, x, y, z], got {:?}",
            params.config.in_channels, patch.shape
        )));
    }
    for &d in &patch.shape[2..] {
        if d % 8 != 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "patch spatial dims must be divisible by 8, got {:?}",
                &patch.shape[2..]
            )));
        }
    }
    let mut tape = Tape::new();
    let param_ids: Vec<VarId> = params
        .tensors
        .iter()
        .map(|t| tape.leaf(t.tensor.clone(), trainable))
        .collect();
    let id = |name: &str| param_ids[params.index_of(name)];

    let x = tape.leaf(patch, false);
    let conv_block = |tape: &mut Tape, prefix: &str, idx: usize, input: VarId| -> Result<VarId> {
        let c = tape.conv3d(
            input,
            id(&format!("{prefix}.conv{idx}.weight")),
            Some(id(&format!("{prefix}.conv{idx}.bias"))),
        )?;
        let n = tape.instance_norm(
            c,
            id(&format!("{prefix}.norm{idx}.gain")),
            id(&format!("{prefix}.norm{idx}.bias")),
        )?;
        tape.relu(n)
    };

    // encoder
    let mut skips = Vec::with_capacity(LEVELS);
    let mut cur = x;
    for level in 1..=LEVELS {
        let prefix = format!("enc{level}");
        let a = conv_block(&mut tape, &prefix, 1, cur)?;
        let b = conv_block(&mut tape, &prefix, 2, a)?;
        skips.push(b);
        cur = tape.maxpool3d(b)?;
    }
    // bottom
    let a = conv_block(&mut tape, "bottom", 1, cur)?;
    cur = conv_block(&mut tape, "bottom", 2, a)?;
    // decoder
    for level in (1..=LEVELS).rev() {
        let prefix = format!("dec{level}");
        let up = tape.upconv3d(cur, id(&format!("{prefix}.upconv.weight")))?;
        let cat = tape.concat_channels(up, skips[level - 1])?;
        let a = conv_block(&mut tape, &prefix, 1, cat)?;
        cur = conv_block(&mut tape, &prefix, 2, a)?;
    }
    // head
    let logits = tape.conv3d(cur, id("head.weight"), Some(id("head.bias")))?;
    let output = tape.sigmoid(logits)?;
    Ok(ForwardPass {
        tape,
        output,
        param_ids,
    })
}

/// Sliding-window inference over a whole volume: overlapping tile
/// probabilities are averaged, then binarized at `threshold`.
pub fn infer_volume(
    params: &UNetParams,
    vol: &VoxelVolume,
    tile: [usize; 3],
    overlap: usize,
    threshold: f64,
) -> Result<VoxelVolume> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "threshold {threshold} must be in (0, 1)"
        )));
    }
    for &t in &tile {
        if t % 8 != 0 || t == 0 {
            return Err(Error::InvalidConfig(format!(
                "tile dims {tile:?} must be divisible by 8"
            )));
        }
        if overlap >= t {
            return Err(Error::InvalidConfig(format!(
                "overlap {overlap} must be smaller than the tile {tile:?}"
            )));
        }
    }
    let probs = infer_probabilities(params, vol, tile, overlap)?;
    let data: Vec<f32> = probs.iter().map(|&p| (p >= threshold) as u8 as f32).collect();
    VoxelVolume::new(vol.dims, vol.spacing, vol.origin, data, VolumeKind::Label)
}

/// Mean foreground probability per voxel from overlapping tiles.
pub fn infer_probabilities(
    params: &UNetParams,
    vol: &VoxelVolume,
    tile: [usize; 3],
    overlap: usize,
) -> Result<Vec<f64>> {
    // zero-pad up to the tile size when the volume is smaller
    let work_dims: [usize; 3] = std::array::from_fn(|a| vol.dims[a].max(tile[a]));
    let n = work_dims[0] * work_dims[1] * work_dims[2];
    let mut padded = vec![0.0f32; n];
    for z in 0..vol.dims[2] {
        for y in 0..vol.dims[1] {
            let src = vol.index(0, y, z);
            let dst = work_dims[0] * (y + work_dims[1] * z);
            padded[dst..dst + vol.dims[0]].copy_from_slice(&vol.data[src..src + vol.dims[0]]);
        }
    }

    let positions = |dim: usize, t: usize| -> Vec<usize> {
        let stride = t - overlap;
        let mut v = Vec::new();
        let mut p = 0;
        loop {
            if p + t >= dim {
                v.push(dim - t);
                break;
            }
            v.push(p);
            p += stride;
        }
        v.dedup();
        v
    };
    let xs = positions(work_dims[0], tile[0]);
    let ys = positions(work_dims[1], tile[1]);
    let zs = positions(work_dims[2], tile[2]);

    let mut sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    for &oz in &zs {
        for &oy in &ys {
            for &ox in &xs {
                let mut patch = Tensor::zeros(vec![1, 1, tile[0], tile[1], tile[2]]);
                for z in 0..tile[2] {
                    for y in 0..tile[1] {
                        for x in 0..tile[0] {
                            patch.data[(x * tile[1] + y) * tile[2] + z] = padded
                                [(ox + x) + work_dims[0] * ((oy + y) + work_dims[1] * (oz + z))]
                                as f64;
                        }
                    }
                }
                let pass = forward_pass(params, patch, false)?;
                let out = &pass.tape.value(pass.output).data;
                for z in 0..tile[2] {
                    for y in 0..tile[1] {
                        for x in 0..tile[0] {
                            let i = (ox + x) + work_dims[0] * ((oy + y) + work_dims[1] * (oz + z));
                            sum[i] += out[(x * tile[1] + y) * tile[2] + z];
                            count[i] += 1;
                        }
                    }
                }
            }
        }
    }

    // crop back to the original dims
    let mut probs = Vec::with_capacity(vol.len());
    for z in 0..vol.dims[2] {
        for y in 0..vol.dims[1] {
            for x in 0..vol.dims[0] {
                let i = x + work_dims[0] * (y + work_dims[1] * z);
                probs.push(sum[i] / count[i] as f64);
            }
        }
    }
    Ok(probs)
}

// ── parameter files ─────────────────────────────────────────────────────────

const PARAM_MAGIC: &[u8; 8] = b"VSEGPAR1";

pub fn save_params(params: &UNetParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAM_MAGIC);
    buf.extend_from_slice(&(params.config.filter_divisor as u32).to_le_bytes());
    buf.extend_from_slice(&(params.config.in_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(params.config.out_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for nt in &params.tensors {
        let name = nt.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(nt.tensor.shape.len() as u32).to_le_bytes());
        for &d in &nt.tensor.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &nt.tensor.data {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("parameter {}", nt.name)));
            }
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32fast::hash(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    crate::volume::atomic_write(path, &buf)
}

pub fn load_params(path: &Path, expected: &UNetConfig) -> Result<UNetParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < PARAM_MAGIC.len() + 4 || &buf[..8] != PARAM_MAGIC {
        return Err(Error::ParamMismatch {
            path: path.to_path_buf(),
            reason: "bad magic or truncated file".into(),
        });
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    if crc32fast::hash(body) != stored {
        return Err(Error::ChecksumMismatch {
            path: path.to_path_buf(),
        });
    }
    let mut pos = 8;
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > body.len() {
            return Err(Error::ParamMismatch {
                path: path.to_path_buf(),
                reason: "unexpected end of file".into(),
            });
        }
        let v = u32::from_le_bytes(body[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let divisor = read_u32(&mut pos)? as usize;
    let in_channels = read_u32(&mut pos)? as usize;
    let out_channels = read_u32(&mut pos)? as usize;
    let config = UNetConfig {
        filter_divisor: divisor,
        in_channels,
        out_channels,
    };
    if &config != expected {
        return Err(Error::ParamMismatch {
            path: path.to_path_buf(),
            reason: format!("file config {config:?} does not match expected {expected:?}"),
        });
    }
    let n_tensors = read_u32(&mut pos)? as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(body[pos..pos + name_len].to_vec()).map_err(|_| {
            Error::ParamMismatch {
                path: path.to_path_buf(),
                reason: "non-utf8 tensor name".into(),
            }
        })?;
        pos += name_len;
        let ndims = read_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndims);
        for _ in 0..ndims {
            shape.push(u64::from_le_bytes(body[pos..pos + 8].try_into().unwrap()) as usize);
            pos += 8;
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(body[pos..pos + 8].try_into().unwrap()));
            pos += 8;
        }
        tensors.push(NamedTensor {
            name,
            tensor: Tensor::new(shape, data)?,
        });
    }
    let params = UNetParams { config, tensors };
    // names and shapes must match the canonical plan exactly
    let plan = layer_plan(&params.config);
    if plan.len() != params.tensors.len() {
        return Err(Error::ParamMismatch {
            path: path.to_path_buf(),
            reason: format!(
                "expected {} tensors, file has {}",
                plan.len(),
                params.tensors.len()
            ),
        });
    }
    for ((name, kind), nt) in plan.iter().zip(&params.tensors) {
        if name != &nt.name || layer_shape(kind) != nt.tensor.shape {
            return Err(Error::ParamMismatch {
                path: path.to_path_buf(),
                reason: format!(
                    "tensor {} has shape {:?}, expected {name} {:?}",
                    nt.name,
                    nt.tensor.shape,
                    layer_shape(kind)
                ),
            });
        }
    }
    Ok(params)
}

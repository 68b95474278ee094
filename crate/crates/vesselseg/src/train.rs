//! Training loop: soft-Dice + L1 objective, Adam, dataset manifests,
//! per-step history, and epoch checkpoints.

use crate::augment::{augment_pair, sample_patches, volume_rng, AugmentConfig};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::metrics;
use crate::unet::{self, forward_pass, UNetConfig, UNetParams};
use crate::volume::{read_volume, VoxelVolume};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// L1 weight-decay coefficient applied to all convolution kernels.
    pub l1_weight: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Smoothing constant in the soft-Dice denominator and numerator.
    pub dice_smooth: f64,
    /// Save a checkpoint every N epochs; 0 disables checkpoints.
    pub checkpoint_every: usize,
    /// Run validation every N epochs; 0 disables validation.
    pub validate_every: usize,
    /// Tile overlap during validation inference.
    pub val_overlap: usize,
    /// Probability threshold for binarizing validation predictions.
    pub threshold: f64,
    /// Stop as soon as validation Dice reaches this value; 0 disables.
    pub stop_at_val_dice: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            l1_weight: 1e-5,
            batch_size: 2,
            max_epochs: 50,
            dice_smooth: 1e-5,
            checkpoint_every: 0,
            validate_every: 1,
            val_overlap: 16,
            threshold: 0.5,
            stop_at_val_dice: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 && self.max_epochs > 0 {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.l1_weight < 0.0 {
            return Err(Error::InvalidConfig("l1_weight must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidConfig("threshold must be in (0, 1)".into()));
        }
        Ok(())
    }
}

// ── dataset manifests ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub label: String,
    /// "train" or "val".
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: VoxelVolume,
    pub label: VoxelVolume,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    crate::volume::atomic_write(path, json.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads every volume named by a manifest; relative paths resolve against
/// the manifest's directory.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &str| -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut ds = Dataset::default();
    for e in &manifest.entries {
        let sample = Sample {
            id: e.id.clone(),
            image: read_volume(&resolve(&e.image))?,
            label: read_volume(&resolve(&e.label))?,
        };
        match e.split.as_str() {
            "train" => ds.train.push(sample),
            "val" => ds.val.push(sample),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown split '{other}' for volume {}",
                    e.id
                )))
            }
        }
    }
    if ds.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

// ── optimizer ───────────────────────────────────────────────────────────────

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one pair of buffers per parameter
/// tensor, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &UNetParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.tensor.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One Adam update over all parameter tensors.
    pub fn step(&mut self, params: &mut UNetParams, grads: &[Vec<f64>], lr: f64) {
        assert_eq!(grads.len(), params.tensors.len());
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (i, nt) in params.tensors.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in nt.tensor.data.iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

// ── single optimization step ────────────────────────────────────────────────

/// Copies an x-fastest volume patch into z-fastest tensor layout at batch
/// slot `b`.
pub fn patch_into_tensor(vol: &VoxelVolume, tensor: &mut Tensor, b: usize) {
    let [dx, dy, dz] = vol.dims;
    let base = b * dx * dy * dz;
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                tensor.data[base + (x * dy + y) * dz + z] = vol.at(x, y, z) as f64;
            }
        }
    }
}

/// Stacks patch pairs into [b, 1, x, y, z] image and label tensors.
pub fn batch_tensors(pairs: &[(VoxelVolume, VoxelVolume)]) -> Result<(Tensor, Tensor)> {
    let Some(first) = pairs.first() else {
        return Err(Error::EmptyDataset);
    };
    let [dx, dy, dz] = first.0.dims;
    let shape = vec![pairs.len(), 1, dx, dy, dz];
    let mut images = Tensor::zeros(shape.clone());
    let mut labels = Tensor::zeros(shape);
    for (b, (img, lbl)) in pairs.iter().enumerate() {
        if img.dims != first.0.dims || lbl.dims != first.0.dims {
            return Err(Error::DimMismatch("ragged batch".into()));
        }
        patch_into_tensor(img, &mut images, b);
        patch_into_tensor(lbl, &mut labels, b);
    }
    // labels may carry interpolation residue only if sampled trilinearly;
    // training expects strict {0, 1}
    for &v in &labels.data {
        if v != 0.0 && v != 1.0 {
            return Err(Error::NonBinaryLabel(v as f32));
        }
    }
    Ok((images, labels))
}

/// Forward + backward + Adam update on one batch. Returns the scalar loss
/// (soft Dice plus the L1 penalty).
pub fn train_step(
    params: &mut UNetParams,
    adam: &mut AdamState,
    images: &Tensor,
    labels: &Tensor,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut pass = forward_pass(params, images.clone(), true)?;
    let dice = pass.tape.dice_loss(pass.output, labels, cfg.dice_smooth)?;
    let conv_ids: Vec<_> = params
        .conv_weight_indices()
        .into_iter()
        .map(|i| pass.param_ids[i])
        .collect();
    let l1 = pass.tape.l1_penalty(&conv_ids, cfg.l1_weight)?;
    let loss = pass.tape.add(dice, l1)?;
    let loss_value = pass.tape.value(loss).data[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {loss_value}")));
    }
    pass.tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = pass
        .param_ids
        .iter()
        .map(|&id| pass.tape.grad(id).to_vec())
        .collect();
    adam.step(params, &grads, cfg.learning_rate);
    Ok(loss_value)
}

// ── full training loop ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation Dice; only present on epochs where validation ran.
    pub val_dice: Option<f64>,
}

pub struct TrainOutput {
    pub params: UNetParams,
    pub history: Vec<HistoryRow>,
}

pub fn history_to_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,epoch,train_loss,val_dice\n");
    for r in history {
        let vd = r.val_dice.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.step, r.epoch, r.train_loss, vd));
    }
    out
}

/// Mean hard Dice of tiled inference over the given samples.
pub fn validate(
    params: &UNetParams,
    samples: &[Sample],
    tile: [usize; 3],
    overlap: usize,
    threshold: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for s in samples {
        let pred = unet::infer_volume(params, &s.image, tile, overlap, threshold)?;
        total += metrics::evaluate(&pred, &s.label, &s.id)?.dice;
    }
    Ok(total / samples.len() as f64)
}

/// Runs the full loop: per epoch, each training volume contributes
/// `patches_per_volume` augmented patches which are consumed in batches.
/// Identical configs and seeds produce bitwise-identical parameters.
pub fn train(
    dataset: &Dataset,
    unet_cfg: &UNetConfig,
    aug_cfg: &AugmentConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    aug_cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = unet::build(unet_cfg, cfg.seed)?;
    let mut adam = AdamState::new(&params);
    let mut history = Vec::new();
    let mut step = 0usize;

    let tile = aug_cfg.patch_size;
    let overlap = cfg.val_overlap.min(tile.iter().copied().min().unwrap() - 8);

    for epoch in 0..cfg.max_epochs {
        // decorrelate epochs while keeping per-volume streams independent
        let epoch_seed = cfg
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x517C_C1B7_2722_0A95));
        let mut queue: Vec<(VoxelVolume, VoxelVolume)> = Vec::new();
        for (vol_idx, sample) in dataset.train.iter().enumerate() {
            let mut rng = volume_rng(epoch_seed, vol_idx as u64);
            for (img, lbl) in sample_patches(&sample.image, &sample.label, aug_cfg, &mut rng)? {
                queue.push(augment_pair(&img, &lbl, aug_cfg, &mut rng)?);
            }
        }
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in queue.chunks(cfg.batch_size) {
            let (images, labels) = batch_tensors(batch)?;
            let loss = train_step(&mut params, &mut adam, &images, &labels, cfg)?;
            step += 1;
            epoch_loss += loss;
            epoch_batches += 1;
            history.push(HistoryRow {
                step,
                epoch,
                train_loss: loss,
                val_dice: None,
            });
        }
        let _ = epoch_loss / epoch_batches.max(1) as f64;

        let mut stop = false;
        if cfg.validate_every > 0 && !dataset.val.is_empty() && (epoch + 1) % cfg.validate_every == 0
        {
            let vd = validate(&params, &dataset.val, tile, overlap, cfg.threshold)?;
            if let Some(last) = history.last_mut() {
                last.val_dice = Some(vd);
            }
            stop = cfg.stop_at_val_dice > 0.0 && vd >= cfg.stop_at_val_dice;
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                unet::save_params(&params, &dir.join(format!("checkpoint_epoch_{epoch}.params")))?;
            }
        }
        if stop {
            break;
        }
    }

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        unet::save_params(&params, &dir.join("final.params"))?;
        crate::volume::atomic_write(&dir.join("history.csv"), history_to_csv(&history).as_bytes())?;
    }
    Ok(TrainOutput { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;
    use tempfile::tempdir;

    fn tiny_unet() -> UNetParams {
        unet::build(&UNetConfig::default(), 11).unwrap()
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = tiny_unet();
        let before = params.tensors[0].tensor.data.clone();
        let mut adam = AdamState::new(&params);
        let mut grads: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.tensor.len()])
            .collect();
        grads[0][0] = 3.7;
        grads[0][1] = -0.2;
        adam.step(&mut params, &grads, 0.01);
        // on the first step mhat/sqrt(vhat) = g/|g|, so the update is
        // -lr * sign(g) up to the epsilon term
        let d0 = params.tensors[0].tensor.data[0] - before[0];
        let d1 = params.tensors[0].tensor.data[1] - before[1];
        assert!((d0 + 0.01).abs() < 1e-6, "d0 = {d0}");
        assert!((d1 - 0.01).abs() < 1e-6, "d1 = {d1}");
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_zero_grad_no_update() {
        let mut params = tiny_unet();
        let before = params.tensors[0].tensor.data.clone();
        let mut adam = AdamState::new(&params);
        let grads: Vec<Vec<f64>> = params
            .tensors
            .iter()
            .map(|t| vec![0.0; t.tensor.len()])
            .collect();
        adam.step(&mut params, &grads, 0.01);
        assert_eq!(params.tensors[0].tensor.data, before);
        assert_eq!(adam.t, 1);
    }

    fn checker_batch(n: usize) -> (Tensor, Tensor) {
        // image is a bright cube on dark background; label marks the cube
        let mut img = VoxelVolume::zeros([8, 8, 8], VolumeKind::Intensity);
        let mut lbl = VoxelVolume::zeros([8, 8, 8], VolumeKind::Label);
        for z in 2..6 {
            for y in 2..6 {
                for x in 2..6 {
                    let i = img.index(x, y, z);
                    img.data[i] = 1.0;
                    lbl.data[i] = 1.0;
                }
            }
        }
        let pairs: Vec<_> = (0..n).map(|_| (img.clone(), lbl.clone())).collect();
        batch_tensors(&pairs).unwrap()
    }

    #[test]
    fn lr_zero_rejected_but_step_possible_with_tiny_lr() {
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loss_decreases_on_overfit_batch() {
        let mut params = tiny_unet();
        let mut adam = AdamState::new(&params);
        let cfg = TrainConfig::default();
        let (images, labels) = checker_batch(1);
        let first = train_step(&mut params, &mut adam, &images, &labels, &cfg).unwrap();
        let mut last = first;
        for _ in 0..24 {
            last = train_step(&mut params, &mut adam, &images, &labels, &cfg).unwrap();
        }
        assert!(
            last < first * 0.5,
            "loss did not halve: first {first}, last {last}"
        );
    }

    #[test]
    fn train_step_is_deterministic() {
        let run = || {
            let mut params = tiny_unet();
            let mut adam = AdamState::new(&params);
            let cfg = TrainConfig::default();
            let (images, labels) = checker_batch(2);
            for _ in 0..3 {
                train_step(&mut params, &mut adam, &images, &labels, &cfg).unwrap();
            }
            params.tensors[0].tensor.data.clone()
        };
        assert_eq!(run(), run());
    }

    fn tiny_dataset() -> Dataset {
        let mut img = VoxelVolume::zeros([16, 16, 16], VolumeKind::Intensity);
        let mut lbl = VoxelVolume::zeros([16, 16, 16], VolumeKind::Label);
        for z in 4..12 {
            for y in 4..12 {
                for x in 4..12 {
                    let i = img.index(x, y, z);
                    img.data[i] = 1.0;
                    lbl.data[i] = 1.0;
                }
            }
        }
        Dataset {
            train: vec![Sample {
                id: "t0".into(),
                image: img.clone(),
                label: lbl.clone(),
            }],
            val: vec![Sample {
                id: "v0".into(),
                image: img,
                label: lbl,
            }],
        }
    }

    fn tiny_aug() -> AugmentConfig {
        AugmentConfig {
            patch_size: [8, 8, 8],
            patches_per_volume: 2,
            elastic_sd: 0.0,
            rot_deg: 0.0,
            scale_frac: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn max_epochs_zero_returns_initial_params() {
        let cfg = TrainConfig {
            max_epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let out = train(&tiny_dataset(), &UNetConfig::default(), &tiny_aug(), &cfg, None).unwrap();
        let initial = unet::build(&UNetConfig::default(), 9).unwrap();
        for (a, b) in out.params.tensors.iter().zip(&initial.tensors) {
            assert_eq!(a.tensor.data, b.tensor.data);
        }
        assert!(out.history.is_empty());
    }

    #[test]
    fn full_loop_is_deterministic_and_writes_outputs() {
        let cfg = TrainConfig {
            max_epochs: 2,
            seed: 4,
            validate_every: 1,
            checkpoint_every: 1,
            batch_size: 2,
            ..Default::default()
        };
        let ds = tiny_dataset();
        let dir = tempdir().unwrap();
        let a = train(&ds, &UNetConfig::default(), &tiny_aug(), &cfg, Some(dir.path())).unwrap();
        let b = train(&ds, &UNetConfig::default(), &tiny_aug(), &cfg, None).unwrap();
        for (x, y) in a.params.tensors.iter().zip(&b.params.tensors) {
            assert_eq!(x.tensor.data, y.tensor.data, "run mismatch in {}", x.name);
        }
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x, y);
        }
        assert!(dir.path().join("final.params").exists());
        assert!(dir.path().join("history.csv").exists());
        assert!(dir.path().join("checkpoint_epoch_0.params").exists());
        assert!(a.history.iter().any(|r| r.val_dice.is_some()));
    }

    #[test]
    fn history_csv_format() {
        let rows = vec![
            HistoryRow {
                step: 1,
                epoch: 0,
                train_loss: 0.5,
                val_dice: None,
            },
            HistoryRow {
                step: 2,
                epoch: 0,
                train_loss: 0.25,
                val_dice: Some(0.75),
            },
        ];
        let csv = history_to_csv(&rows);
        assert_eq!(csv, "step,epoch,train_loss,val_dice\n1,0,0.5,\n2,0,0.25,0.75\n");
    }

    #[test]
    fn manifest_roundtrip_and_dataset_load() {
        let dir = tempdir().unwrap();
        let ds = tiny_dataset();
        crate::volume::write_volume(&ds.train[0].image, &dir.path().join("img.mhd")).unwrap();
        crate::volume::write_volume(&ds.train[0].label, &dir.path().join("lbl.mhd")).unwrap();
        let manifest = Manifest {
            entries: vec![ManifestEntry {
                id: "t0".into(),
                image: "img.mhd".into(),
                label: "lbl.mhd".into(),
                split: "train".into(),
            }],
        };
        let mpath = dir.path().join("manifest.json");
        write_manifest(&manifest, &mpath).unwrap();
        assert_eq!(read_manifest(&mpath).unwrap(), manifest);
        let loaded = load_dataset(&mpath).unwrap();
        assert_eq!(loaded.train.len(), 1);
        assert_eq!(loaded.train[0].image.data, ds.train[0].image.data);
    }

    #[test]
    fn rejects_non_binary_labels_in_batch() {
        let img = VoxelVolume::zeros([8, 8, 8], VolumeKind::Intensity);
        let mut lbl = VoxelVolume::zeros([8, 8, 8], VolumeKind::Label);
        lbl.data[0] = 0.5;
        assert!(batch_tensors(&[(img, lbl)]).is_err());
    }
}

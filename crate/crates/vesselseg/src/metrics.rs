//! Hard Dice / IoU evaluation, TP/FP/FN overlay volumes, and aggregation.

use crate::error::{Error, Result};
use crate::volume::{VolumeKind, VoxelVolume};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub volume_id: String,
    pub dice: f64,
    pub iou: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    /// Both volumes empty: dice = iou = 1 by convention.
    pub both_empty: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean_dice: f64,
    pub sd_dice: f64,
    pub mean_iou: f64,
    pub sd_iou: f64,
    pub n: usize,
}

fn check_binary_pair(pred: &VoxelVolume, truth: &VoxelVolume) -> Result<()> {
    if pred.dims != truth.dims {
        return Err(Error::DimMismatch(format!(
            "pred dims {:?} vs truth dims {:?}",
            pred.dims, truth.dims
        )));
    }
    for v in pred.data.iter().chain(&truth.data) {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::NonBinaryLabel(*v));
        }
    }
    Ok(())
}

pub fn evaluate(pred: &VoxelVolume, truth: &VoxelVolume, volume_id: &str) -> Result<SegmentationReport> {
    check_binary_pair(pred, truth)?;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        match (p != 0.0, t != 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let both_empty = tp + fp + fn_ == 0;
    let (dice, iou) = if both_empty {
        (1.0, 1.0)
    } else {
        (
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64,
            tp as f64 / (tp + fp + fn_) as f64,
        )
    };
    Ok(SegmentationReport {
        volume_id: volume_id.to_string(),
        dice,
        iou,
        tp,
        fp,
        fn_,
        both_empty,
    })
}

/// Unweighted per-volume means with population standard deviations.
pub fn aggregate(reports: &[SegmentationReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::InvalidConfig("aggregate needs at least one report".into()));
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&SegmentationReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    let sd = |f: &dyn Fn(&SegmentationReport) -> f64, m: f64| {
        (reports.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt()
    };
    let mean_dice = mean(&|r| r.dice);
    let mean_iou = mean(&|r| r.iou);
    Ok(AggregateReport {
        mean_dice,
        sd_dice: sd(&|r| r.dice, mean_dice),
        mean_iou,
        sd_iou: sd(&|r| r.iou, mean_iou),
        n: reports.len(),
    })
}

pub const OVERLAY_BACKGROUND: f32 = 0.0;
pub const OVERLAY_TP: f32 = 1.0;
pub const OVERLAY_FP: f32 = 2.0;
pub const OVERLAY_FN: f32 = 3.0;

/// 3-label overlay map: 0 background, 1 true positive, 2 false positive,
/// 3 false negative.
pub fn overlay(pred: &VoxelVolume, truth: &VoxelVolume) -> Result<VoxelVolume> {
    check_binary_pair(pred, truth)?;
    let data: Vec<f32> = pred
        .data
        .iter()
        .zip(&truth.data)
        .map(|(&p, &t)| match (p != 0.0, t != 0.0) {
            (true, true) => OVERLAY_TP,
            (true, false) => OVERLAY_FP,
            (false, true) => OVERLAY_FN,
            (false, false) => OVERLAY_BACKGROUND,
        })
        .collect();
    // overlay carries 4 codes, so it is stored as intensity
    VoxelVolume::new(pred.dims, pred.spacing, pred.origin, data, VolumeKind::Intensity)
}

/// CSV rows (volume_id, dice, iou, tp, fp, fn) with a header line.
pub fn reports_to_csv(reports: &[SegmentationReport]) -> String {
    let mut out = String::from("volume_id,dice,iou,tp,fp,fn\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.volume_id, r.dice, r.iou, r.tp, r.fp, r.fn_
        ));
    }
    out
}

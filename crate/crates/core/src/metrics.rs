//! Confusion matrices, IoU and the eight-direction polar breakdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{LabelMap, IGNORE};

/// Number of azimuth sectors in the polar breakdown.
pub const SECTORS: usize = 8;

/// `K×K` pixel counts, rows are ground truth and columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

/// Per-class IoU in percent; `None` marks classes with an empty union.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouSummary {
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes with a non-empty union, in percent (0 if none).
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds the joint counts of every pixel whose ground truth is not [`IGNORE`].
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        self.accumulate_where(pred, gt, |_| true)
    }

    /// As [`accumulate`](Self::accumulate), restricted to columns where `keep(col)`.
    pub fn accumulate_where(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        keep: impl Fn(usize) -> bool,
    ) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let k = self.classes;
        for (idx, (&p, &t)) in pred.data.iter().zip(&gt.data).enumerate() {
            if t == IGNORE || !keep(idx % gt.width) {
                continue;
            }
            if t as usize >= k || p as usize >= k {
                return Err(Error::Data(format!(
                    "label pair (truth {t}, prediction {p}) outside [0, {k})"
                )));
            }
            self.counts[t as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!(
                "merging {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_k = TP / (TP + FP + FN)`; zero-union classes are left out of the mean.
    pub fn iou(&self) -> IouSummary {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| 100.0 * tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouSummary { per_class, miou }
    }
}

/// Sector of column `col` in a `width`-column panorama.
///
/// Sectors are `⌊W/n⌋` columns wide; sector 0 is centered on the middle
/// column (the front view) and the others follow clockwise in increasing
/// column order, wrapping at the seam. Leftover columns when `n ∤ W` join the
/// last sector.
pub fn sector_of(col: usize, width: usize, n: usize) -> usize {
    let sw = (width / n).max(1);
    let start = (width / 2 + width - sw / 2) % width;
    let rel = (col + width - start) % width;
    (rel / sw).min(n - 1)
}

/// One confusion matrix per azimuth sector.
pub fn polar_eval(pred: &LabelMap, gt: &LabelMap, classes: usize, n: usize) -> Result<Vec<ConfusionMatrix>> {
    if n == 0 {
        return Err(Error::Config("polar evaluation needs at least one sector".into()));
    }
    (0..n)
        .map(|s| {
            let mut cm = ConfusionMatrix::new(classes);
            cm.accumulate_where(pred, gt, |c| sector_of(c, gt.width, n) == s)?;
            Ok(cm)
        })
        .collect()
}

/// Evaluation summary written as `eval.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// IoU per class id (percent, `null` for empty unions) on the panorama test split.
    pub per_class: BTreeMap<String, Option<f64>>,
    pub miou: f64,
    /// mIoU per azimuth sector, sector 0 at the front.
    pub sectors: Vec<Option<f64>>,
    pub sector_pixels: Vec<u64>,
    pub pixels: u64,
    /// mIoU on held-out pinhole scenes, when evaluated.
    pub pinhole_miou: Option<f64>,
    /// `pinhole_miou − miou`.
    pub gap: Option<f64>,
}

impl EvalReport {
    pub fn new(
        panorama: &ConfusionMatrix,
        sectors: &[ConfusionMatrix],
        pinhole: Option<&ConfusionMatrix>,
    ) -> Self {
        let s = panorama.iou();
        let pinhole_miou = pinhole.map(|cm| cm.iou().miou);
        Self {
            per_class: s
                .per_class
                .iter()
                .enumerate()
                .map(|(k, v)| (format!("{k:02}"), *v))
                .collect(),
            miou: s.miou,
            sectors: sectors
                .iter()
                .map(|cm| (cm.total() > 0).then(|| cm.iou().miou))
                .collect(),
            sector_pixels: sectors.iter().map(ConfusionMatrix::total).collect(),
            pixels: panorama.total(),
            pinhole_miou,
            gap: pinhole_miou.map(|p| p - s.miou),
        }
    }

    /// Pixel-weighted mean of the sector mIoUs.
    pub fn weighted_sector_miou(&self) -> f64 {
        let total: u64 = self.sector_pixels.iter().sum();
        if total == 0 {
            return 0.0;
        }
        self.sectors
            .iter()
            .zip(&self.sector_pixels)
            .map(|(m, &n)| m.unwrap_or(0.0) * n as f64)
            .sum::<f64>()
            / total as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Polar breakdown as CSV: `sector,pixels,miou`.
    pub fn polar_csv(&self) -> String {
        let mut out = String::from("sector,pixels,miou\n");
        for (i, (m, n)) in self.sectors.iter().zip(&self.sector_pixels).enumerate() {
            let m = m.map(|v| format!("{v:.4}")).unwrap_or_default();
            let _ = writeln!(out, "{i},{n},{m}");
        }
        out
    }

    /// Plain-text table for the terminal.
    pub fn render(&self) -> String {
        let pct = |v: Option<f64>| v.map(|v| format!("{v:6.2}")).unwrap_or_else(|| "     -".into());
        let mut out = String::new();
        let _ = writeln!(out, "class   IoU");
        for (k, v) in &self.per_class {
            let _ = writeln!(out, "{k:>5} {}", pct(*v));
        }
        let _ = writeln!(out, " mIoU {:6.2}  ({} pixels)", self.miou, self.pixels);
        let sectors: Vec<String> = self.sectors.iter().map(|v| pct(*v)).collect();
        let _ = writeln!(out, "polar {}", sectors.join(" "));
        if let (Some(p), Some(g)) = (self.pinhole_miou, self.gap) {
            let _ = writeln!(out, "pinhole mIoU {p:6.2}  gap {g:6.2}");
        }
        out
    }
}

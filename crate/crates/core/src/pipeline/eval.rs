//! Evaluation over matching prediction/ground-truth sequence trees,
//! split into existing and interpolated frames.

use crate::error::{Error, Result};
use crate::losses::{psnr, psnr_luma, ssim};
use crate::pipeline::data::ingest;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Existing,
    Interpolated,
}

impl FrameKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameKind::Existing => "existing",
            FrameKind::Interpolated => "interpolated",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub sequence: String,
    pub frame_index: usize,
    pub kind: FrameKind,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_luma: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Aggregate {
    pub count: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

fn aggregate<'a>(records: impl Iterator<Item = &'a FrameRecord>) -> Aggregate {
    let mut count = 0usize;
    let mut psnr_sum = 0.0;
    let mut psnr_count = 0usize;
    let mut ssim_sum = 0.0;
    for r in records {
        count += 1;
        ssim_sum += r.ssim;
        if r.psnr.is_finite() {
            psnr_sum += r.psnr;
            psnr_count += 1;
        }
    }
    Aggregate {
        count,
        psnr_mean: if psnr_count > 0 {
            psnr_sum / psnr_count as f64
        } else {
            f64::INFINITY
        },
        ssim_mean: if count > 0 { ssim_sum / count as f64 } else { 0.0 },
    }
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub frames: Vec<FrameRecord>,
    pub overall: Aggregate,
    pub existing: Aggregate,
    pub interpolated: Aggregate,
}

fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root.display().to_string(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Compares matching sequence trees. `rate` classifies frame kinds: indices
/// divisible by it are existing frames. Roots that directly contain PNG
/// frames are treated as a single sequence.
pub fn evaluate(pred_root: &Path, gt_root: &Path, rate: usize) -> Result<EvalReport> {
    if rate == 0 {
        return Err(Error::invalid("rate must be positive"));
    }
    let pred_dirs = sequence_dirs(pred_root)?;
    let gt_dirs = sequence_dirs(gt_root)?;

    let pairs: Vec<(String, PathBuf, PathBuf)> = if pred_dirs.is_empty() && gt_dirs.is_empty() {
        vec![(
            ".".to_string(),
            pred_root.to_path_buf(),
            gt_root.to_path_buf(),
        )]
    } else {
        let names = |dirs: &[PathBuf]| -> Vec<String> {
            dirs.iter()
                .map(|d| d.file_name().unwrap().to_string_lossy().into_owned())
                .collect()
        };
        let pred_names = names(&pred_dirs);
        let gt_names = names(&gt_dirs);
        let missing_in_pred: Vec<&String> =
            gt_names.iter().filter(|n| !pred_names.contains(n)).collect();
        let missing_in_gt: Vec<&String> =
            pred_names.iter().filter(|n| !gt_names.contains(n)).collect();
        if !missing_in_pred.is_empty() || !missing_in_gt.is_empty() {
            return Err(Error::Data(format!(
                "sequence trees differ; missing in predictions: {missing_in_pred:?}, \
                 missing in ground truth: {missing_in_gt:?}"
            )));
        }
        gt_names
            .iter()
            .map(|n| (n.clone(), pred_root.join(n), gt_root.join(n)))
            .collect()
    };

    let mut frames = Vec::new();
    for (name, pred_dir, gt_dir) in &pairs {
        let pred = ingest(pred_dir)?;
        let gt = ingest(gt_dir)?;
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "sequence {name}: {} predicted frames vs {} ground-truth frames",
                pred.len(),
                gt.len()
            )));
        }
        for i in 0..pred.len() {
            let kind = if i % rate == 0 {
                FrameKind::Existing
            } else {
                FrameKind::Interpolated
            };
            frames.push(FrameRecord {
                sequence: name.clone(),
                frame_index: i,
                kind,
                psnr: psnr(&pred.frames[i], &gt.frames[i])?,
                ssim: ssim(&pred.frames[i], &gt.frames[i])?,
                psnr_luma: psnr_luma(&pred.frames[i], &gt.frames[i])?,
            });
        }
    }

    let overall = aggregate(frames.iter());
    let existing = aggregate(frames.iter().filter(|r| r.kind == FrameKind::Existing));
    let interpolated = aggregate(frames.iter().filter(|r| r.kind == FrameKind::Interpolated));
    Ok(EvalReport {
        frames,
        overall,
        existing,
        interpolated,
    })
}

fn psnr_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::json!("inf")
    }
}

/// One JSON line per frame followed by per-kind and overall aggregates.
pub fn write_report_jsonl(path: &Path, report: &EvalReport) -> Result<()> {
    let mut f =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in &report.frames {
        let line = serde_json::json!({
            "sequence": r.sequence,
            "frame_index": r.frame_index,
            "kind": r.kind.as_str(),
            "psnr": psnr_json(r.psnr),
            "ssim": r.ssim,
            "psnr_luma": psnr_json(r.psnr_luma),
        });
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    for (kind, agg) in [
        ("existing", &report.existing),
        ("interpolated", &report.interpolated),
        ("overall", &report.overall),
    ] {
        let line = serde_json::json!({
            "aggregate": kind,
            "count": agg.count,
            "psnr": psnr_json(agg.psnr_mean),
            "ssim": agg.ssim_mean,
        });
        writeln!(f, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

//! Evaluation metrics and a manifest-driven dataset harness.
//!
//! A manifest is a plain-text file with one tab-separated line per image:
//!
//! ```text
//! image_path<TAB>groundtruth_path<TAB>init_kind<TAB>init_path<TAB>metric
//! ```
//!
//! `init_kind` is `bbox` (init_path holds one `x y w h` line), `trimap`
//! (grayscale PNG with 0/128/255), or `prior` (grayscale PNG scaled to
//! probability). `metric` is `bbox_error` or `overlap`; `bbox_error`
//! requires `bbox` init. Relative paths resolve against the manifest's
//! directory. Blank lines and lines starting with `#` are skipped.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::imageio::{
    load_bbox, load_groundtruth, load_lab_image, load_prior_map, load_trimap, trimap_from_bbox,
    trimap_from_prior, BBox, SegMask, TriMap,
};
use crate::pipeline::{segment, SegConfig};
use crate::{Error, Result};

/// Fraction of mislabeled pixels inside the box.
pub fn bbox_error(mask: &SegMask, groundtruth: &SegMask, bbox: BBox) -> Result<f64> {
    if mask.width != groundtruth.width || mask.height != groundtruth.height {
        return Err(Error::InvalidInput(
            "mask and ground truth dimensions differ".into(),
        ));
    }
    if bbox.w == 0 || bbox.h == 0 {
        return Err(Error::InvalidInput("empty bounding box".into()));
    }
    if bbox.x + bbox.w > mask.width || bbox.y + bbox.h > mask.height {
        return Err(Error::InvalidInput("bounding box exceeds mask".into()));
    }
    let mut wrong = 0u64;
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            if mask.get(x, y) != groundtruth.get(x, y) {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / bbox.area() as f64)
}

/// Foreground intersection over union. Two empty foregrounds agree
/// perfectly by definition; that case is logged since it usually signals a
/// degenerate input.
pub fn overlap_score(mask: &SegMask, groundtruth: &SegMask) -> Result<f64> {
    if mask.width != groundtruth.width || mask.height != groundtruth.height {
        return Err(Error::InvalidInput(
            "mask and ground truth dimensions differ".into(),
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (a, b) in mask.foreground.iter().zip(&groundtruth.foreground) {
        inter += (*a && *b) as u64;
        union += (*a || *b) as u64;
    }
    if union == 0 {
        log::warn!(target: "graphseg::eval", "both masks empty; overlap defined as 1.0");
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    BboxError,
    Overlap,
}

impl MetricKind {
    pub fn name(&self) -> &'static str {
        match self {
            MetricKind::BboxError => "bbox_error",
            MetricKind::Overlap => "overlap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InitKind {
    Bbox(PathBuf),
    Trimap(PathBuf),
    Prior(PathBuf),
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub image_id: String,
    pub image: PathBuf,
    pub groundtruth: PathBuf,
    pub init: InitKind,
    pub metric: MetricKind,
}

/// One successfully evaluated image.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub image_id: String,
    pub metric: MetricKind,
    /// Metric value in [0, 1].
    pub value: f64,
    /// Configuration the value was produced with.
    pub config: SegConfig,
}

/// Per-entry outcome; failures carry the message and leave the rest of the
/// dataset running.
#[derive(Debug, Clone)]
pub enum EntryResult {
    Ok(EvalRecord),
    Failed { image_id: String, message: String },
}

#[derive(Debug, Clone)]
pub struct DatasetReport {
    pub entries: Vec<EntryResult>,
    /// Mean metric over successful entries; `None` when none succeeded.
    pub mean: Option<f64>,
}

impl DatasetReport {
    pub fn ok_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| matches!(e, EntryResult::Ok(_)))
            .count()
    }

    pub fn failed_count(&self) -> usize {
        self.entries.len() - self.ok_count()
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let path = PathBuf::from(p);
    if path.is_absolute() {
        path
    } else {
        base.join(path)
    }
}

/// Parses a manifest file. An empty manifest is an error: the summary mean
/// would be undefined.
pub fn parse_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut entries = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::Manifest {
                line: line_no,
                message: format!("expected 5 tab-separated fields, got {}", fields.len()),
            });
        }
        let image = resolve(&base, fields[0]);
        let image_id = image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| fields[0].to_string());
        let init_path = resolve(&base, fields[3]);
        let init = match fields[2] {
            "bbox" => InitKind::Bbox(init_path),
            "trimap" => InitKind::Trimap(init_path),
            "prior" => InitKind::Prior(init_path),
            other => {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!("unknown init kind {other:?}"),
                })
            }
        };
        let metric = match fields[4] {
            "bbox_error" => MetricKind::BboxError,
            "overlap" => MetricKind::Overlap,
            other => {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!("unknown metric {other:?}"),
                })
            }
        };
        if metric == MetricKind::BboxError && !matches!(init, InitKind::Bbox(_)) {
            return Err(Error::Manifest {
                line: line_no,
                message: "bbox_error metric requires bbox init".into(),
            });
        }
        entries.push(ManifestEntry {
            image_id,
            image,
            groundtruth: resolve(&base, fields[1]),
            init,
            metric,
        });
    }
    if entries.is_empty() {
        return Err(Error::Empty(format!(
            "manifest {} lists no images",
            path.display()
        )));
    }
    Ok(entries)
}

fn build_trimap(entry: &ManifestEntry, width: u32, height: u32, p0: f64) -> Result<TriMap> {
    match &entry.init {
        InitKind::Bbox(path) => trimap_from_bbox(width, height, load_bbox(path)?),
        InitKind::Trimap(path) => load_trimap(path),
        InitKind::Prior(path) => {
            let (pw, ph, prior) = load_prior_map(path)?;
            if pw != width || ph != height {
                return Err(Error::InvalidInput(
                    "prior map and image dimensions differ".into(),
                ));
            }
            trimap_from_prior(width, height, &prior, p0)
        }
    }
}

fn eval_entry(entry: &ManifestEntry, cfg: &SegConfig, p0: f64) -> Result<f64> {
    let img = load_lab_image(&entry.image)?;
    let gt = load_groundtruth(&entry.groundtruth)?;
    let trimap = build_trimap(entry, img.width, img.height, p0)?;
    let outcome = segment(&img, &trimap, cfg)?;
    match (&entry.metric, &entry.init) {
        (MetricKind::BboxError, InitKind::Bbox(path)) => {
            bbox_error(&outcome.mask, &gt, load_bbox(path)?)
        }
        (MetricKind::BboxError, _) => unreachable!("rejected at parse time"),
        (MetricKind::Overlap, _) => overlap_score(&outcome.mask, &gt),
    }
}

/// Runs the whole manifest. Entries evaluate concurrently; results keep
/// manifest order and per-entry failures do not stop the run.
pub fn run_dataset(manifest: &Path, cfg: &SegConfig, p0: f64) -> Result<DatasetReport> {
    let entries = parse_manifest(manifest)?;
    let results: Vec<EntryResult> = entries
        .par_iter()
        .map(|entry| match eval_entry(entry, cfg, p0) {
            Ok(value) => EntryResult::Ok(EvalRecord {
                image_id: entry.image_id.clone(),
                metric: entry.metric,
                value,
                config: cfg.clone(),
            }),
            Err(e) => EntryResult::Failed {
                image_id: entry.image_id.clone(),
                message: e.to_string(),
            },
        })
        .collect();
    let ok: Vec<f64> = results
        .iter()
        .filter_map(|r| match r {
            EntryResult::Ok(rec) => Some(rec.value),
            EntryResult::Failed { .. } => None,
        })
        .collect();
    let mean = if ok.is_empty() {
        None
    } else {
        Some(ok.iter().sum::<f64>() / ok.len() as f64)
    };
    Ok(DatasetReport {
        entries: results,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_of(w: u32, h: u32, fg: &[u8]) -> SegMask {
        SegMask::new(w, h, fg.iter().map(|&v| v != 0).collect()).unwrap()
    }

    #[test]
    fn bbox_error_half_wrong() {
        // 4x4 box; prediction wrong on exactly half its pixels.
        let gt = mask_of(8, 8, &[0; 64]);
        let mut pred = vec![0u8; 64];
        for y in 2..4 {
            for x in 2..6 {
                pred[y * 8 + x] = 1;
            }
        }
        let pred = mask_of(8, 8, &pred);
        let bbox = BBox {
            x: 2,
            y: 2,
            w: 4,
            h: 4,
        };
        let err = bbox_error(&pred, &gt, bbox).unwrap();
        assert!((err - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bbox_error_perfect_and_invalid() {
        let gt = mask_of(4, 4, &[1; 16]);
        assert_eq!(
            bbox_error(
                &gt,
                &gt,
                BBox {
                    x: 0,
                    y: 0,
                    w: 4,
                    h: 4
                }
            )
            .unwrap(),
            0.0
        );
        assert!(bbox_error(
            &gt,
            &gt,
            BBox {
                x: 0,
                y: 0,
                w: 5,
                h: 4
            }
        )
        .is_err());
        assert!(bbox_error(
            &gt,
            &gt,
            BBox {
                x: 0,
                y: 0,
                w: 0,
                h: 4
            }
        )
        .is_err());
        let other = mask_of(2, 2, &[1; 4]);
        assert!(bbox_error(
            &gt,
            &other,
            BBox {
                x: 0,
                y: 0,
                w: 2,
                h: 2
            }
        )
        .is_err());
    }

    #[test]
    fn overlap_half_area() {
        // Prediction covers the left half, truth the right half plus the
        // middle column overlap region sized to give IoU 1/3.
        let mut pred = vec![0u8; 16];
        let mut gt = vec![0u8; 16];
        for y in 0..4 {
            for x in 0..2 {
                pred[y * 4 + x] = 1;
            }
            for x in 1..3 {
                gt[y * 4 + x] = 1;
            }
        }
        let score = overlap_score(&mask_of(4, 4, &pred), &mask_of(4, 4, &gt)).unwrap();
        assert!((score - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn overlap_empty_union_is_perfect() {
        let empty = mask_of(3, 3, &[0; 9]);
        assert_eq!(overlap_score(&empty, &empty).unwrap(), 1.0);
        let full = mask_of(3, 3, &[1; 9]);
        assert_eq!(overlap_score(&full, &full).unwrap(), 1.0);
        assert_eq!(overlap_score(&full, &empty).unwrap(), 0.0);
    }

    #[test]
    fn manifest_parse_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.tsv");
        std::fs::write(
            &path,
            "# comment\n\nimg/a.png\tgt/a.png\tbbox\tboxes/a.txt\tbbox_error\n\
             b.jpg\tb_gt.png\tprior\tb_prior.png\toverlap\n",
        )
        .unwrap();
        let entries = parse_manifest(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].image_id, "a");
        assert_eq!(entries[0].metric, MetricKind::BboxError);
        assert_eq!(entries[0].image, dir.path().join("img/a.png"));
        assert!(matches!(entries[1].init, InitKind::Prior(_)));

        std::fs::write(&path, "a.png\tgt.png\ttrimap\tt.png\tbbox_error\n").unwrap();
        assert!(parse_manifest(&path).is_err(), "bbox_error needs bbox init");

        std::fs::write(&path, "\n# nothing\n").unwrap();
        assert!(matches!(parse_manifest(&path), Err(Error::Empty(_))));

        std::fs::write(&path, "a.png\tgt.png\tbbox\n").unwrap();
        assert!(matches!(
            parse_manifest(&path),
            Err(Error::Manifest { line: 1, .. })
        ));
    }
}

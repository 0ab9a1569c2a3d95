//! Segmentation and occlusion scores, and the line-delimited metrics log.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::NUM_LABELS;

/// Named scalar metrics, ordered by name.
pub type Metrics = BTreeMap<String, f32>;

/// Per-class intersection and union counts accumulated over a dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IouAccumulator {
    inter: [u64; NUM_LABELS],
    union: [u64; NUM_LABELS],
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &[u8], truth: &[u8]) {
        assert_eq!(pred.len(), truth.len(), "label maps differ in size");
        for (&p, &t) in pred.iter().zip(truth) {
            for k in 0..NUM_LABELS as u8 {
                let (a, b) = (p == k, t == k);
                self.inter[k as usize] += (a && b) as u64;
                self.union[k as usize] += (a || b) as u64;
            }
        }
    }

    /// IoU of one class; 1 when the class never appears in either map.
    pub fn iou(&self, class: usize) -> f32 {
        if self.union[class] == 0 {
            1.0
        } else {
            self.inter[class] as f32 / self.union[class] as f32
        }
    }
}

/// Fraction of object-overlap pixels whose predicted label names the true front object.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct OcclusionAccumulator {
    correct: u64,
    total: u64,
}

impl OcclusionAccumulator {
    /// `overlap` marks pixels covered by both full objects.
    pub fn add(&mut self, pred: &[u8], truth: &[u8], overlap: &[u8]) {
        for ((&p, &t), &o) in pred.iter().zip(truth).zip(overlap) {
            if o != 0 {
                self.total += 1;
                self.correct += (p == t) as u64;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// 1 when no overlap pixel was seen.
    pub fn accuracy(&self) -> f32 {
        if self.total == 0 {
            1.0
        } else {
            self.correct as f32 / self.total as f32
        }
    }
}

/// Formats one record as `step=N key=value ...` with keys in order.
pub fn format_record(step: u64, metrics: &Metrics) -> String {
    let mut line = format!("step={step}");
    for (k, v) in metrics {
        line.push_str(&format!(" {k}={v}"));
    }
    line
}

/// Parses a record written by [`format_record`].
pub fn parse_record(line: &str) -> Option<(u64, Metrics)> {
    let mut parts = line.split_whitespace();
    let step = parts.next()?.strip_prefix("step=")?.parse().ok()?;
    let mut metrics = Metrics::new();
    for part in parts {
        let (k, v) = part.split_once('=')?;
        metrics.insert(k.to_string(), v.parse().ok()?);
    }
    Some((step, metrics))
}

/// Appends metric records to a file, flushing after each line.
pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, step: u64, metrics: &Metrics) -> Result<()> {
        writeln!(self.out, "{}", format_record(step, metrics))
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

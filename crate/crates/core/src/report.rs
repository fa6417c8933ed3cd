//! Run artifacts: the metrics CSV, the JSON run report, and the data
//! checksum that ties both to the exact training inputs.
//!
//! The CSV is fully deterministic (no timestamps), so two runs with the
//! same config and seed produce byte-identical files. Wall-clock time
//! only ever appears in the JSON report.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::tensor::Tensor;

pub const METRICS_SCHEMA_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Incremental FNV-1a over tensor contents, bit for bit.
#[derive(Debug, Clone, Copy)]
pub struct DataHasher {
    state: u64,
}

impl DataHasher {
    pub fn new() -> Self {
        DataHasher {
            state: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn update_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    /// Hash shape then raw little-endian f64 bits, so reshapes and
    /// value changes both show up.
    pub fn update_tensor(&mut self, t: &Tensor) {
        for &d in t.shape() {
            self.update_bytes(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            self.update_bytes(&v.to_le_bytes());
        }
    }

    pub fn finish(&self) -> u64 {
        self.state
    }

    pub fn finish_hex(&self) -> String {
        format!("{:016x}", self.state)
    }
}

impl Default for DataHasher {
    fn default() -> Self {
        Self::new()
    }
}

/// One line of metrics.csv. Absent values serialize as empty cells;
/// train rows leave the AP columns empty and eval rows leave the loss
/// columns empty.
#[derive(Debug, Clone, Default)]
pub struct MetricsRow {
    pub iter: usize,
    /// supervised, warmup or adapt.
    pub phase: &'static str,
    /// train or eval.
    pub kind: &'static str,
    pub rpn_cls: Option<f64>,
    pub rpn_reg: Option<f64>,
    pub roi_cls: Option<f64>,
    pub roi_reg: Option<f64>,
    pub total: Option<f64>,
    pub mss: Option<f64>,
    pub nst: Option<f64>,
    pub mtt: Option<f64>,
    pub mst: Option<f64>,
    pub disc: Option<f64>,
    pub ap: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    /// student or teacher.
    pub model: &'static str,
}

pub const METRICS_HEADER: &str = "schema_version,iter,phase,kind,rpn_cls,rpn_reg,roi_cls,roi_reg,total,mss,nst,mtt,mst,disc,ap,ap50,ap75,model";

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            METRICS_SCHEMA_VERSION,
            self.iter,
            self.phase,
            self.kind,
            cell(self.rpn_cls),
            cell(self.rpn_reg),
            cell(self.roi_cls),
            cell(self.roi_reg),
            cell(self.total),
            cell(self.mss),
            cell(self.nst),
            cell(self.mtt),
            cell(self.mst),
            cell(self.disc),
            cell(self.ap),
            cell(self.ap50),
            cell(self.ap75),
            self.model
        )
    }
}

/// Buffered CSV writer; the header goes out on creation.
#[derive(Debug)]
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(MetricsWriter { out })
    }

    pub fn write_row(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// report.json for a single training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub strategy: String,
    pub seed: u64,
    pub iters_run: usize,
    pub wall_seconds: f64,
    /// FNV-1a over every raw training image before any mixing.
    pub data_checksum: String,
    pub diverged: bool,
    pub final_eval: EvalSummary,
    pub best_ap50: f64,
    pub best_iter: usize,
    /// Present for adaptation runs.
    pub teacher_eval: Option<EvalSummary>,
    pub config: Config,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonEntry {
    pub strategy: String,
    pub eval: EvalSummary,
    pub delta_ap50_vs_baseline: f64,
}

/// comparison.json for a multi-strategy run on one seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub seed: u64,
    pub entries: Vec<ComparisonEntry>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    std::fs::write(path, text)
}

//! Metric reports, per-view tables, loss logs and the label palette.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use sage_core::labels::{CLASS_NAMES, PALETTE};
use sage_core::metrics::ViewRow;
use sage_core::training::{Observer, StepRecord};
use serde::{Deserialize, Serialize};

use crate::error::{write, Error, Result};

pub const METRIC_REPORT_SCHEMA: &str = include_str!("../assets/metric_report.schema.json");
pub const PALETTE_JSON: &str = include_str!("../assets/palette.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_gen: usize,
    pub n_real: usize,
    pub embedder_id: String,
    pub seed: u64,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Serialize)]
struct PaletteEntry<'a> {
    index: usize,
    name: &'a str,
    rgb: [u8; 3],
}

/// The label palette as shipped in `assets/palette.json`.
pub fn palette_json() -> String {
    let entries: Vec<PaletteEntry> = CLASS_NAMES
        .iter()
        .zip(PALETTE)
        .enumerate()
        .map(|(index, (name, rgb))| PaletteEntry { index, name, rgb })
        .collect();
    let mut s = serde_json::to_string_pretty(&entries).expect("palette serializes");
    s.push('\n');
    s
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(f)))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

/// `pose_index,yaw,pitch,sifid`, one row per pose.
pub fn write_view_rows(path: &Path, rows: &[ViewRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct LossRow<'a> {
    stage: u8,
    step: u64,
    name: &'a str,
    value: f64,
}

/// Streams every loss component as a `stage,step,name,value` row.
pub struct LossLog {
    path: std::path::PathBuf,
    writer: csv::Writer<BufWriter<File>>,
    error: Option<Error>,
    pub last: Option<StepRecord>,
}

impl LossLog {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            writer: csv_writer(path)?,
            error: None,
            last: None,
        })
    }

    pub fn finish(mut self) -> Result<()> {
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Observer for LossLog {
    fn on_step(&mut self, r: &StepRecord) {
        for &(name, value) in &r.losses {
            let row = LossRow {
                stage: r.stage,
                step: r.step,
                name,
                value,
            };
            if let Err(e) = self.writer.serialize(row) {
                self.error.get_or_insert(csv_err(&self.path, e));
            }
        }
        self.last = Some(r.clone());
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value).expect("serializable");
    json.push(b'\n');
    write(path, &json)
}

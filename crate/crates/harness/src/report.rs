//! Long-format CSV reports: one metric value per row, with provenance.

use std::path::Path;

use mrvpc_core::metrics::MetricReport;
use serde::{Deserialize, Serialize};

use crate::{fsutil, HarnessError, Result, BUILD_ID};

pub const HEADER: [&str; 7] = ["scenario", "model", "metric", "value", "seed", "config_hash", "build_id"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub model: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
    pub build_id: String,
}

/// Run-level provenance stamped onto every row.
#[derive(Clone, Debug)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn row(&self, scenario: &str, model: &str, metric: &str, value: f64) -> Row {
        Row {
            scenario: scenario.to_string(),
            model: model.to_string(),
            metric: metric.to_string(),
            value,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            build_id: BUILD_ID.to_string(),
        }
    }

    /// CIDEr, METEOR-lite and R@4, plus consistency when present.
    pub fn rows(&self, r: &MetricReport) -> Vec<Row> {
        let mut out = vec![
            self.row(&r.scenario, &r.model, "cider", r.cider),
            self.row(&r.scenario, &r.model, "meteor", r.meteor),
            self.row(&r.scenario, &r.model, "r4", r.r4),
        ];
        if let Some(c) = r.consistency {
            out.push(self.row(&r.scenario, &r.model, "consistency", c));
        }
        out
    }
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(HEADER).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("CSV is UTF-8")
}

pub fn from_csv(text: &str) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| HarnessError::Data(e.to_string()))?.clone();
    if header.iter().ne(HEADER) {
        return Err(HarnessError::Data(format!("unexpected CSV header {:?}", header.iter().collect::<Vec<_>>())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| HarnessError::Data(format!("malformed CSV: {e}"))))
        .collect()
}

pub fn save(path: &Path, rows: &[Row]) -> Result<()> {
    fsutil::write_atomic(path, to_csv(rows).as_bytes())
}

pub fn load(path: &Path) -> Result<Vec<Row>> {
    from_csv(&fsutil::read_string(path)?)
}

/// Value of the first row matching all three keys.
pub fn lookup(rows: &[Row], scenario: &str, model: &str, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.scenario == scenario && r.model == model && r.metric == metric)
        .map(|r| r.value)
}

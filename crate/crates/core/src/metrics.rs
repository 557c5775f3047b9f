//! Line-delimited JSON metrics logs and CSV export.
//!
//! Every line is a flat object carrying `kind`, `run_id` and `config_hash`
//! next to the record's own fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::Event;

const TIMING_KEYS: [&str; 3] = ["forward_ms", "backward_ms", "wall_ms"];

pub fn run_id(cfg: &RunConfig) -> String {
    format!(
        "{}-{}",
        cfg.name.as_deref().unwrap_or("run"),
        &cfg.hash()[..12]
    )
}

pub struct MetricsWriter<W: Write> {
    out: W,
    run_id: String,
    config_hash: String,
    include_timings: bool,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        Ok(Self::new(BufWriter::new(File::create(path)?), cfg))
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, cfg: &RunConfig) -> Self {
        Self {
            out,
            run_id: run_id(cfg),
            config_hash: cfg.hash(),
            include_timings: cfg.eval.log_timings,
        }
    }

    fn emit(&mut self, kind: &str, fields: Map<String, Value>) -> Result<()> {
        let mut row = Map::new();
        row.insert("kind".into(), Value::from(kind));
        row.insert("run_id".into(), Value::from(self.run_id.clone()));
        row.insert("config_hash".into(), Value::from(self.config_hash.clone()));
        for (k, v) in fields {
            if k == "kind" || (!self.include_timings && TIMING_KEYS.contains(&k.as_str())) {
                continue;
            }
            row.insert(k, v);
        }
        let line = serde_json::to_string(&row).map_err(|e| Error::Contract(e.to_string()))?;
        if let Err(e) = writeln!(self.out, "{line}") {
            let _ = self.out.flush();
            return Err(e.into());
        }
        Ok(())
    }

    /// First row of a log: the canonical config and detector thresholds.
    pub fn header(&mut self, cfg: &RunConfig, data_provenance: &str) -> Result<()> {
        let mut m = Map::new();
        m.insert("seed".into(), Value::from(cfg.seed));
        m.insert("config".into(), Value::from(cfg.canonical()));
        m.insert("data".into(), Value::from(data_provenance));
        m.insert("co_window".into(), Value::from(cfg.eval.co.window));
        m.insert("co_spike".into(), Value::from(cfg.eval.co.spike));
        m.insert("co_drop".into(), Value::from(cfg.eval.co.drop));
        m.insert(
            "probe_metric".into(),
            Value::from("elin = mean |three-point residual| (unsquared)"),
        );
        m.insert(
            "train_metric".into(),
            Value::from("e_lin = batch mean of squared residual"),
        );
        self.emit("header", m)
    }

    pub fn event(&mut self, ev: &Event) -> Result<()> {
        let v = serde_json::to_value(ev).map_err(|e| Error::Contract(e.to_string()))?;
        let kind = v
            .get("kind")
            .and_then(Value::as_str)
            .unwrap_or("event")
            .to_string();
        self.emit(&kind, into_map(v))
    }

    /// Any serializable flat record under a custom kind tag.
    pub fn record<T: Serialize>(&mut self, kind: &str, rec: &T) -> Result<()> {
        let v = serde_json::to_value(rec).map_err(|e| Error::Contract(e.to_string()))?;
        self.emit(kind, into_map(v))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

fn into_map(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("value".into(), other);
            m
        }
    }
}

/// Parses a metrics log, one object per line.
pub fn read_log(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let f = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(&line)
            .map_err(|e| Error::Contract(format!("{} line {}: {e}", path.display(), i + 1)))?;
        rows.push(into_map(v));
    }
    Ok(rows)
}

pub const EPOCH_COLUMNS: [&str; 7] = [
    "epoch",
    "train_loss",
    "clean_acc",
    "robust_acc",
    "elin_probe",
    "misalignment_probe",
    "co_flag",
];

/// Per-epoch curves as CSV, one row per `epoch` record.
pub fn export_epoch_csv<W: Write>(rows: &[Map<String, Value>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Contract(e.to_string());
    w.write_record(EPOCH_COLUMNS).map_err(io)?;
    for row in rows
        .iter()
        .filter(|r| r.get("kind").and_then(Value::as_str) == Some("epoch"))
    {
        let cells: Vec<String> = EPOCH_COLUMNS
            .iter()
            .map(|k| match row.get(*k) {
                Some(Value::String(s)) => s.clone(),
                Some(v) => v.to_string(),
                None => String::new(),
            })
            .collect();
        w.write_record(&cells).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{EpochRecord, StepRecord};

    fn cfg() -> RunConfig {
        RunConfig::parse("[model]\ninput_dim = 784\nhidden = [4]\nclasses = 10\n").unwrap()
    }

    #[test]
    fn rows_are_flat_and_tagged() {
        let c = cfg();
        let mut w = MetricsWriter::new(Vec::new(), &c);
        w.header(&c, "synthetic").unwrap();
        let step = StepRecord {
            epoch: 0,
            step: 0,
            lr: 0.1,
            loss: 2.3,
            e_lin: Some(0.5),
            reg_value: Some(0.5),
            lambda: 1.0,
            forward_ms: 1.0,
            backward_ms: 2.0,
            wall_ms: 3.5,
        };
        w.event(&Event::Step(step)).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            let m = v.as_object().unwrap();
            assert!(m.contains_key("run_id") && m.contains_key("config_hash"));
            assert!(m.values().all(|x| !x.is_object() && !x.is_array()));
            assert!(!m.contains_key("wall_ms"));
        }
    }

    #[test]
    fn csv_has_one_row_per_epoch() {
        let c = cfg();
        let mut w = MetricsWriter::new(Vec::new(), &c);
        for epoch in 0..3 {
            let rec = EpochRecord {
                epoch,
                train_loss: 1.0,
                clean_acc: 0.5,
                robust_acc: 0.25,
                elin_probe: 0.1,
                misalignment_probe: 0.2,
                co_flag: false,
            };
            w.event(&Event::Epoch(rec)).unwrap();
        }
        let text = String::from_utf8(w.into_inner()).unwrap();
        let rows: Vec<_> = text
            .lines()
            .map(|l| into_map(serde_json::from_str(l).unwrap()))
            .collect();
        let mut out = Vec::new();
        export_epoch_csv(&rows, &mut out).unwrap();
        let csv = String::from_utf8(out).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("epoch,train_loss"));
    }
}

//! CSV artifacts: training logs, metric reports and per-sample predictions.

use std::path::Path;

use agegrad::metrics::MetricsReport;
use agegrad::{Error, Result};

use crate::io::write_atomic;

pub const TRAIN_LOG_HEADER: [&str; 6] = ["epoch", "train_loss", "val_loss", "val_mae", "lr", "seconds"];

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_mae: f64,
    /// Rate at the epoch's first optimizer step.
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

fn parse_field(row: usize, name: &str, v: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| Error::Parse { row, msg: format!("bad {name} {v:?}") })
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(TRAIN_LOG_HEADER).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.val_mae.to_string(),
                r.lr.to_string(),
                r.seconds.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| Error::Parse { row: 1, msg: e.to_string() })?;
        if header.iter().ne(TRAIN_LOG_HEADER) {
            return Err(Error::Parse { row: 1, msg: format!("expected header {}", TRAIN_LOG_HEADER.join(",")) });
        }
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(|e| Error::Parse {
                row: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let f = |i: usize| parse_field(line, TRAIN_LOG_HEADER[i], &rec[i]);
            let epoch = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Parse { row: line, msg: format!("bad epoch {:?}", &rec[0]) })?;
            if epoch != rows.len() + 1 {
                return Err(Error::Parse { row: line, msg: format!("epoch {epoch} out of sequence") });
            }
            rows.push(LogRow { epoch, train_loss: f(1)?, val_loss: f(2)?, val_mae: f(3)?, lr: f(4)?, seconds: f(5)? });
        }
        Ok(TrainLog { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn best_val_mae(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.val_mae).min_by(f64::total_cmp)
    }
}

/// `metric,value` rows: `samples`, `mae`, `cs@k`, `cdf@t`, `auc`.
pub fn metrics_to_csv(r: &MetricsReport) -> String {
    let mut out = String::from("metric,value\n");
    out += &format!("samples,{}\nmae,{}\n", r.samples, r.mae);
    for (k, v) in &r.cs {
        out += &format!("cs@{k},{v}\n");
    }
    for (t, v) in &r.cdf {
        out += &format!("cdf@{t},{v}\n");
    }
    out += &format!("auc,{}\n", r.auc);
    out
}

pub fn metrics_from_csv(text: &str) -> Result<MetricsReport> {
    let mut rep = MetricsReport { samples: 0, mae: f64::NAN, cs: Vec::new(), cdf: Vec::new(), auc: f64::NAN };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "metric,value")) => {}
        _ => return Err(Error::Parse { row: 1, msg: "expected header metric,value".into() }),
    }
    for (i, line) in lines {
        let row = i + 1;
        let (k, v) = line
            .split_once(',')
            .ok_or_else(|| Error::Parse { row, msg: format!("expected metric,value, got {line:?}") })?;
        let val = parse_field(row, k, v)?;
        let num = |s: &str| parse_field(row, k, s);
        match k {
            "samples" => rep.samples = val as usize,
            "mae" => rep.mae = val,
            "auc" => rep.auc = val,
            _ if k.starts_with("cs@") => rep.cs.push((num(&k[3..])?, val)),
            _ if k.starts_with("cdf@") => rep.cdf.push((num(&k[4..])?, val)),
            _ => return Err(Error::Parse { row, msg: format!("unknown metric {k:?}") }),
        }
    }
    if rep.cdf.is_empty() {
        return Err(Error::Parse { row: 1, msg: "report has no cdf rows".into() });
    }
    Ok(rep)
}

/// `path,age,prediction` rows.
pub fn predictions_to_csv(rows: &[(String, f64, f64)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["path", "age", "prediction"]).expect("in-memory write");
    for (p, a, pr) in rows {
        w.write_record([p.clone(), a.to_string(), pr.to_string()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
}

pub fn predictions_from_csv(text: &str) -> Result<Vec<(String, f64, f64)>> {
    let mut rd = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| Error::Parse { row: e.position().map_or(0, |p| p.line() as usize), msg: e.to_string() })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        out.push((rec[0].to_string(), parse_field(line, "age", &rec[1])?, parse_field(line, "prediction", &rec[2])?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trip_and_errors() {
        let log = TrainLog {
            rows: vec![
                LogRow { epoch: 1, train_loss: 3.5, val_loss: 2.0, val_mae: 9.1, lr: 1e-3, seconds: 0.0 },
                LogRow { epoch: 2, train_loss: 1.25, val_loss: 1.5, val_mae: 7.0, lr: 5e-4, seconds: 0.0 },
            ],
        };
        assert_eq!(TrainLog::parse(&log.to_csv()).unwrap(), log);
        assert_eq!(log.best_val_mae(), Some(7.0));
        let bad = log.to_csv().replace("1.25", "x");
        assert!(matches!(TrainLog::parse(&bad), Err(Error::Parse { row: 3, .. })));
    }

    #[test]
    fn metrics_round_trip() {
        let r = MetricsReport::standard(&[1.0, 5.0, 9.0], &[2.0, 5.0, 3.0]).unwrap();
        assert_eq!(metrics_from_csv(&metrics_to_csv(&r)).unwrap(), r);
    }
}

//! Experiment metric tables.
//!
//! Columns are fixed; floats are written with nine significant digits,
//! infinities as `inf`/`-inf`, and missing values as empty fields.

use std::path::Path;

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 12] = [
    "experiment_id",
    "defense",
    "seed",
    "round",
    "mse",
    "psnr",
    "train_loss",
    "fisher_trace",
    "bound_value",
    "noise_frobenius",
    "prune_ratio",
    "wall_time",
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricRow {
    pub experiment_id: String,
    pub defense: String,
    pub seed: u64,
    pub round: Option<usize>,
    pub mse: Option<f64>,
    pub psnr: Option<f64>,
    pub train_loss: Option<f64>,
    pub fisher_trace: Option<f64>,
    pub bound_value: Option<f64>,
    pub noise_frobenius: Option<f64>,
    pub prune_ratio: Option<f64>,
    pub wall_time: Option<f64>,
}

pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.8e}")
    }
}

pub fn parse_float(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "nan" => Ok(f64::NAN),
        _ => s
            .parse()
            .map_err(|_| Error::Csv(format!("not a number: {s:?}"))),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_float(s).map(Some)
    }
}

impl MetricRow {
    pub fn fields(&self) -> [String; 12] {
        [
            self.experiment_id.clone(),
            self.defense.clone(),
            self.seed.to_string(),
            self.round.map(|r| r.to_string()).unwrap_or_default(),
            opt(self.mse),
            opt(self.psnr),
            opt(self.train_loss),
            opt(self.fisher_trace),
            opt(self.bound_value),
            opt(self.noise_frobenius),
            opt(self.prune_ratio),
            opt(self.wall_time),
        ]
    }

    fn from_record(rec: &csv::StringRecord) -> Result<Self> {
        if rec.len() != COLUMNS.len() {
            return Err(Error::Csv(format!(
                "row has {} fields, expected {}",
                rec.len(),
                COLUMNS.len()
            )));
        }
        let seed = rec[2]
            .parse()
            .map_err(|_| Error::Csv(format!("bad seed {:?}", &rec[2])))?;
        let round = if rec[3].is_empty() {
            None
        } else {
            Some(
                rec[3]
                    .parse()
                    .map_err(|_| Error::Csv(format!("bad round {:?}", &rec[3])))?,
            )
        };
        Ok(MetricRow {
            experiment_id: rec[0].to_string(),
            defense: rec[1].to_string(),
            seed,
            round,
            mse: parse_opt(&rec[4])?,
            psnr: parse_opt(&rec[5])?,
            train_loss: parse_opt(&rec[6])?,
            fisher_trace: parse_opt(&rec[7])?,
            bound_value: parse_opt(&rec[8])?,
            noise_frobenius: parse_opt(&rec[9])?,
            prune_ratio: parse_opt(&rec[10])?,
            wall_time: parse_opt(&rec[11])?,
        })
    }
}

/// Writes any table with a header row.
pub fn write_table<S: AsRef<str>>(path: &Path, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header.iter().map(|h| h.as_ref()))
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(format!("{}: {e}", path.display()))
    }
}

pub fn write_metrics(rows: &[MetricRow], path: &Path) -> Result<()> {
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.fields().to_vec()).collect();
    write_table(path, &COLUMNS, &body)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().ne(COLUMNS.iter().copied()) {
        return Err(Error::Csv(format!(
            "{}: columns {:?} do not match the metric schema",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    r.records()
        .map(|rec| MetricRow::from_record(&rec.map_err(|e| csv_err(path, e))?))
        .collect()
}

//! Result rows: one per (scenario, method, seed, parameter setting).

use std::cmp::Ordering;
use std::path::Path;

use crate::adapt::StreamResult;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;

pub const HEADER: [&str; 13] = [
    "scenario",
    "method",
    "seed",
    "benign_acc",
    "noisy_ratio",
    "c0",
    "rho",
    "m",
    "t0",
    "n_mem",
    "insertions",
    "skipped_events",
    "final_loss",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub scenario: String,
    pub method: String,
    pub seed: u64,
    pub benign_acc: f64,
    pub noisy_ratio: f64,
    pub c0: f64,
    pub rho: f64,
    pub m: f64,
    pub t0: usize,
    pub n_mem: usize,
    pub insertions: usize,
    pub skipped_events: usize,
    pub final_loss: f64,
}

impl CsvRow {
    pub fn from_result(r: &StreamResult, cfg: &RunConfig) -> Self {
        let mcfg = cfg.method_config(r.method);
        Self {
            scenario: r.scenario.to_string(),
            method: r.method.label(),
            seed: r.seed,
            benign_acc: r.benign_accuracy,
            noisy_ratio: cfg.scenario_config(r.scenario).noisy_count() as f64
                / cfg.stream.benign_count as f64,
            c0: mcfg.c0,
            rho: mcfg.esm.rho,
            m: mcfg.m,
            t0: mcfg.t0,
            n_mem: mcfg.capacity,
            insertions: r.insertions,
            skipped_events: r.skipped_events,
            final_loss: r.final_loss,
        }
    }

    fn fields(&self) -> [String; 13] {
        [
            self.scenario.clone(),
            self.method.clone(),
            self.seed.to_string(),
            sig6(self.benign_acc),
            sig6(self.noisy_ratio),
            sig6(self.c0),
            sig6(self.rho),
            sig6(self.m),
            self.t0.to_string(),
            self.n_mem.to_string(),
            self.insertions.to_string(),
            self.skipped_events.to_string(),
            sig6(self.final_loss),
        ]
    }

    /// Row order: scenario, method, seed, then the parameter columns.
    pub fn sort_cmp(&self, other: &Self) -> Ordering {
        let num = |a: f64, b: f64| a.total_cmp(&b);
        self.scenario
            .cmp(&other.scenario)
            .then_with(|| self.method.cmp(&other.method))
            .then_with(|| self.seed.cmp(&other.seed))
            .then_with(|| num(self.noisy_ratio, other.noisy_ratio))
            .then_with(|| num(self.c0, other.c0))
            .then_with(|| num(self.rho, other.rho))
            .then_with(|| num(self.m, other.m))
            .then_with(|| self.t0.cmp(&other.t0))
            .then_with(|| self.n_mem.cmp(&other.n_mem))
            .then_with(|| num(self.benign_acc, other.benign_acc))
    }
}

/// `x` rounded to 6 significant digits, printed in its shortest exact form.
pub fn sig6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.5e}")
        .parse()
        .expect("scientific notation parses");
    format!("{rounded}")
}

/// Serializes rows (sorted) with the fixed header.
pub fn to_csv_string(rows: &[CsvRow]) -> Result<String> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(CsvRow::sort_cmp);
    let mut w = ::csv::Writer::from_writer(Vec::new());
    let csv_err = |e: ::csv::Error| Error::Csv(e.to_string());
    w.write_record(HEADER).map_err(csv_err)?;
    for r in &sorted {
        w.write_record(r.fields()).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}

pub fn write_csv(rows: &[CsvRow], path: &Path) -> Result<()> {
    let text = to_csv_string(rows)?;
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = ::csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Csv(e.to_string()))?.clone();
    if header.iter().ne(HEADER.iter().copied()) {
        return Err(Error::Csv(format!(
            "unexpected header: {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Csv(e.to_string()))?;
        let line = i + 2;
        let get = |j: usize| rec.get(j).unwrap_or("");
        fn num<T: std::str::FromStr>(s: &str, col: &str, line: usize) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Csv(format!("line {line}: bad {col} value `{s}`")))
        }
        rows.push(CsvRow {
            scenario: get(0).to_string(),
            method: get(1).to_string(),
            seed: num(get(2), HEADER[2], line)?,
            benign_acc: num(get(3), HEADER[3], line)?,
            noisy_ratio: num(get(4), HEADER[4], line)?,
            c0: num(get(5), HEADER[5], line)?,
            rho: num(get(6), HEADER[6], line)?,
            m: num(get(7), HEADER[7], line)?,
            t0: num(get(8), HEADER[8], line)?,
            n_mem: num(get(9), HEADER[9], line)?,
            insertions: num(get(10), HEADER[10], line)?,
            skipped_events: num(get(11), HEADER[11], line)?,
            final_loss: num(get(12), HEADER[12], line)?,
        });
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_csv(&text)
}

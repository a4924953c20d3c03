//! Plaintext mean ± std tables over result rows.

use std::collections::BTreeMap;

use crate::adapt::mean_std;
use crate::harness::csv::{sig6, CsvRow};

/// One table line: rows sharing scenario, method and every parameter column.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportLine {
    pub scenario: String,
    pub method: String,
    pub params: String,
    pub runs: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub mean_insertions: f64,
}

pub fn summarize(rows: &[CsvRow]) -> Vec<ReportLine> {
    let mut groups: BTreeMap<(String, String, String), Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        let params = format!(
            "noisy={} c0={} rho={} m={} t0={} N={}",
            sig6(r.noisy_ratio),
            sig6(r.c0),
            sig6(r.rho),
            sig6(r.m),
            r.t0,
            r.n_mem
        );
        groups
            .entry((r.scenario.clone(), r.method.clone(), params))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((scenario, method, params), rs)| {
            let mut accs: Vec<f64> = rs.iter().map(|r| r.benign_acc).collect();
            accs.sort_by(f64::total_cmp);
            let (mean_acc, std_acc) = mean_std(&accs);
            let ins: Vec<f64> = rs.iter().map(|r| r.insertions as f64).collect();
            ReportLine {
                scenario,
                method,
                params,
                runs: rs.len(),
                mean_acc,
                std_acc,
                mean_insertions: mean_std(&ins).0,
            }
        })
        .collect()
}

/// Accuracy shown in percent, as `mean ± std`.
pub fn render_report(rows: &[CsvRow]) -> String {
    let lines = summarize(rows);
    let mut out = format!(
        "{:<8} {:<14} {:>4} {:>16} {:>10}  {}\n",
        "scenario", "method", "runs", "benign acc (%)", "insertions", "parameters"
    );
    for l in &lines {
        let acc = format!("{:.2} ± {:.2}", 100.0 * l.mean_acc, 100.0 * l.std_acc);
        out.push_str(&format!(
            "{:<8} {:<14} {:>4} {:>16} {:>10.1}  {}\n",
            l.scenario, l.method, l.runs, acc, l.mean_insertions, l.params
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, seed: u64, acc: f64) -> CsvRow {
        CsvRow {
            scenario: "noise".into(),
            method: method.into(),
            seed,
            benign_acc: acc,
            noisy_ratio: 1.0,
            c0: 0.99,
            rho: 0.05,
            m: 0.2,
            t0: 64,
            n_mem: 64,
            insertions: 4 * seed as usize,
            skipped_events: 0,
            final_loss: 0.1,
        }
    }

    #[test]
    fn groups_by_method_with_population_std() {
        let rows = vec![
            row("sotta", 0, 0.5),
            row("em", 0, 0.4),
            row("sotta", 1, 0.7),
        ];
        let lines = summarize(&rows);
        assert_eq!(lines.len(), 2);
        let s = lines.iter().find(|l| l.method == "sotta").unwrap();
        assert_eq!(s.runs, 2);
        assert!((s.mean_acc - 0.6).abs() < 1e-12);
        assert!((s.std_acc - 0.1).abs() < 1e-12);
        assert_eq!(s.mean_insertions, 2.0);
    }

    #[test]
    fn order_of_rows_does_not_matter() {
        let a = vec![
            row("sotta", 0, 0.5),
            row("sotta", 1, 0.7),
            row("em", 0, 0.4),
        ];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(render_report(&a), render_report(&b));
        assert!(render_report(&a).contains("60.00 ± 10.00"));
    }

    #[test]
    fn different_parameters_form_separate_groups() {
        let mut r = row("sotta", 1, 0.7);
        r.c0 = 0.5;
        assert_eq!(summarize(&[row("sotta", 0, 0.5), r]).len(), 2);
    }
}

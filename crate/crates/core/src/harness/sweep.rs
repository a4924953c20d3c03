//! Scenario x method x seed grids, optionally crossed with one config key.
//!
//! Each job builds one stream and runs every method on it. Jobs own all of
//! their state, so they run on a rayon pool and are reassembled in job order;
//! the output is identical for any thread count.

use rayon::prelude::*;

use crate::adapt::Method;
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, CLI_LINE};
use crate::harness::csv::CsvRow;
use crate::harness::run_methods;
use crate::network::Network;
use crate::stream::Scenario;

/// Environment variable that caps the sweep's worker threads.
pub const THREADS_ENV: &str = "SOTTA_THREADS";

/// Key prefixes a sweep may vary. Data, network and pretraining keys would
/// invalidate the checkpoint.
pub const SWEEPABLE_PREFIXES: [&str; 3] = ["adapt.", "stream.", "attack."];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Optional `(key, values)` crossed with the grid.
    pub vary: Option<(String, Vec<String>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Job {
    pub config: RunConfig,
    pub scenario: Scenario,
    pub seed: u64,
}

/// `SOTTA_THREADS` if set to a positive integer, else the number of cores.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

impl SweepSpec {
    /// Expands to jobs in a fixed order: value, scenario, seed.
    pub fn jobs(&self, base: &RunConfig) -> Result<Vec<Job>> {
        if self.scenarios.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument(
                "sweep needs at least one scenario, method and seed".into(),
            ));
        }
        let configs = match &self.vary {
            None => vec![base.clone()],
            Some((key, values)) => {
                if !SWEEPABLE_PREFIXES.iter().any(|p| key.starts_with(p)) {
                    return Err(Error::Config {
                        line: CLI_LINE,
                        key: key.clone(),
                        msg: format!(
                            "only keys under {} can be swept",
                            SWEEPABLE_PREFIXES.join(", ")
                        ),
                    });
                }
                if values.is_empty() {
                    return Err(Error::InvalidArgument("sweep values are empty".into()));
                }
                values
                    .iter()
                    .map(|v| {
                        let mut c = base.clone();
                        c.set(key, v).map_err(|msg| Error::Config {
                            line: CLI_LINE,
                            key: key.clone(),
                            msg,
                        })?;
                        c.check().map_err(|(key, msg)| Error::Config {
                            line: CLI_LINE,
                            key: key.to_string(),
                            msg,
                        })?;
                        Ok(c)
                    })
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let mut jobs = Vec::new();
        for config in &configs {
            for &scenario in &self.scenarios {
                for &seed in &self.seeds {
                    jobs.push(Job {
                        config: config.clone(),
                        scenario,
                        seed,
                    });
                }
            }
        }
        Ok(jobs)
    }
}

/// Runs each job's methods; rows come back sorted.
pub fn run_jobs(
    jobs: &[Job],
    methods: &[Method],
    net: &Network,
    threads: usize,
) -> Result<Vec<CsvRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let per_job: Vec<Result<Vec<CsvRow>>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let results = run_methods(&job.config, net, job.scenario, methods, job.seed)?;
                Ok(results
                    .iter()
                    .map(|r| CsvRow::from_result(r, &job.config))
                    .collect())
            })
            .collect()
    });
    let mut rows = Vec::new();
    for r in per_job {
        rows.extend(r?);
    }
    rows.sort_by(CsvRow::sort_cmp);
    Ok(rows)
}

/// Expands `spec` against `base` and runs it on `threads` workers.
pub fn sweep(
    base: &RunConfig,
    spec: &SweepSpec,
    net: &Network,
    threads: usize,
) -> Result<Vec<CsvRow>> {
    let jobs = spec.jobs(base)?;
    run_jobs(&jobs, &spec.methods, net, threads)
}

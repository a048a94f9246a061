//! Result rows and their CSV/JSON persistence.

use super::config::ExperimentConfig;
use super::stats::Summary;
use crate::error::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str =
    "method,metric,l,mean,variance,stderr,replications,m,n,gamma,t,s,coupling,sigma,z,config_hash";

/// One aggregated statistic at one iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub method: String,
    pub metric: String,
    pub l: usize,
    pub stats: Summary,
    pub m: usize,
    pub n: usize,
    pub gamma: f64,
    pub t: f64,
    pub s: f64,
    pub coupling: f64,
    pub sigma: f64,
    pub z: f64,
    pub config_hash: String,
}

impl Row {
    /// Rows for a curve of summaries, with the point's parameters attached.
    pub fn curve(point: &ExperimentConfig, hash: &str, method: &str, metric: &str, curve: &[Summary]) -> Vec<Row> {
        curve
            .iter()
            .enumerate()
            .map(|(l, &stats)| Row {
                method: method.into(),
                metric: metric.into(),
                l,
                stats,
                m: point.size.m,
                n: point.n(),
                gamma: point.size.gamma,
                t: point.algorithm.t,
                s: point.algorithm.s,
                coupling: point.mixture.coupling,
                sigma: point.surrogate.sigma,
                z: point.surrogate.z,
                config_hash: hash.into(),
            })
            .collect()
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn to_csv(rows: &[Row]) -> String {
    let mut out = String::with_capacity(160 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.metric,
            r.l,
            num(r.stats.mean),
            num(r.stats.variance),
            num(r.stats.stderr),
            r.stats.count,
            r.m,
            r.n,
            num(r.gamma),
            num(r.t),
            num(r.s),
            num(r.coupling),
            num(r.sigma),
            num(r.z),
            r.config_hash
        )
        .unwrap();
    }
    out
}

fn field<T: std::str::FromStr>(v: &str, name: &str, line: usize) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parse(format!("line {line}: bad {name} `{v}`")))
}

/// Parse and validate CSV text written by [`to_csv`].
pub fn from_csv(text: &str) -> Result<Vec<Row>> {
    let mut lines = text.split('\n');
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parse("unexpected CSV header".into()));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let ln = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 16 {
            return Err(Error::Parse(format!("line {ln}: {} fields", f.len())));
        }
        if !super::config::METHODS.contains(&f[0]) {
            return Err(Error::Parse(format!("line {ln}: unknown method `{}`", f[0])));
        }
        rows.push(Row {
            method: f[0].into(),
            metric: f[1].into(),
            l: field(f[2], "l", ln)?,
            stats: Summary {
                mean: field(f[3], "mean", ln)?,
                variance: field(f[4], "variance", ln)?,
                stderr: field(f[5], "stderr", ln)?,
                count: field(f[6], "replications", ln)?,
            },
            m: field(f[7], "m", ln)?,
            n: field(f[8], "n", ln)?,
            gamma: field(f[9], "gamma", ln)?,
            t: field(f[10], "t", ln)?,
            s: field(f[11], "s", ln)?,
            coupling: field(f[12], "coupling", ln)?,
            sigma: field(f[13], "sigma", ln)?,
            z: field(f[14], "z", ln)?,
            config_hash: f[15].into(),
        });
    }
    Ok(rows)
}

/// Write `config.toml`, `results.csv` and `summary.json` into `dir`.
pub fn write_run(dir: &Path, cfg: &ExperimentConfig, rows: &[Row], summary: &serde_json::Value) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.canonical())?;
    std::fs::write(dir.join("results.csv"), to_csv(rows))?;
    let json = serde_json::to_string_pretty(summary).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(())
}

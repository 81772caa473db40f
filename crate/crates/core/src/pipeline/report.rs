//! Summary tables assembled from the per-method CSVs of a finished run.

use std::fmt;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use super::artifacts::{self as art, Csv};
use super::phases::Method;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const CURVES_CSV: &str = "reward_curves.csv";

/// Final evaluation of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub epoch: usize,
    pub final_reward: f64,
    pub ua: f64,
    pub ira: f64,
    pub fd: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<SummaryRow>,
    /// `(method, iteration, mean reward)` for every logged iteration.
    pub curves: Vec<(Method, usize, f64)>,
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<6} {:>6} {:>8} {:>7} {:>7} {:>10}", "method", "epoch", "reward", "ua", "ira", "fd")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<6} {:>6} {:>8.3} {:>7.4} {:>7.4} {:>10.4}",
                r.method.name(),
                r.epoch,
                r.final_reward,
                r.ua,
                r.ira,
                r.fd
            )?;
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == ErrorKind::NotFound {
            Error::MissingArtifact(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Data rows of a CSV whose header must equal `header`.
fn rows<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(malformed(path, format!("expected header `{header}`")));
    }
    let rows: Vec<Vec<&str>> = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').collect()).collect();
    let width = header.split(',').count();
    if rows.is_empty() {
        return Err(malformed(path, "no data rows"));
    }
    if rows.iter().any(|r| r.len() != width) {
        return Err(malformed(path, format!("rows must have {width} fields")));
    }
    Ok(rows)
}

fn num<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field.parse().map_err(|_| malformed(path, format!("`{field}` is not a number")))
}

/// Collects the last metrics row and the reward curve of every method that
/// left an unlearned checkpoint or a metrics file in `dir`, and writes the
/// summary and curve CSVs next to them.
pub fn emit_report(dir: &Path) -> Result<Report> {
    let ran: Vec<Method> = Method::ALL
        .into_iter()
        .filter(|m| {
            dir.join(art::unlearned_ckpt(m.name())).exists() || dir.join(art::metrics_csv(m.name())).exists()
        })
        .collect();
    if ran.is_empty() {
        return Err(Error::MissingArtifact(dir.join(art::metrics_csv(Method::Cgru.name()))));
    }
    let mut report = Report { rows: Vec::new(), curves: Vec::new() };
    for m in ran {
        let mpath = dir.join(art::metrics_csv(m.name()));
        let dpath = dir.join(art::diagnostics_csv(m.name()));
        let mtext = read(&mpath)?;
        let dtext = read(&dpath)?;
        let last = rows(&mpath, &mtext, EvalReport::CSV_HEADER)?.pop().expect("rows is non-empty");
        let diag = rows(&dpath, &dtext, art::DIAGNOSTICS_HEADER)?;
        for r in &diag {
            report.curves.push((m, num(&dpath, r[0])?, num(&dpath, r[6])?));
        }
        report.rows.push(SummaryRow {
            method: m,
            epoch: num(&mpath, last[2])?,
            final_reward: num(&dpath, diag[diag.len() - 1][6])?,
            ua: num(&mpath, last[3])?,
            ira: num(&mpath, last[4])?,
            fd: num(&mpath, last[5])?,
        });
    }
    let mut summary = Csv::new("method,epoch,final_reward,ua,ira,fd");
    for r in &report.rows {
        summary.row(&[&r.method.name(), &r.epoch, &r.final_reward, &r.ua, &r.ira, &r.fd]);
    }
    summary.write(&dir.join(SUMMARY_CSV))?;
    let mut curves = Csv::new("iteration,method,mean_reward");
    for (m, it, r) in &report.curves {
        curves.row(&[it, &m.name(), r]);
    }
    curves.write(&dir.join(CURVES_CSV))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_method(dir: &Path, m: &str, ua: f64, rewards: &[f64]) {
        let mut metrics = Csv::new(EvalReport::CSV_HEADER);
        metrics.line(&format!("abc,{m},0,0,1,0.01"));
        metrics.line(&format!("abc,{m},{},{ua},0.8,2.5", rewards.len()));
        metrics.write(&dir.join(art::metrics_csv(m))).unwrap();
        let mut diag = Csv::new(art::DIAGNOSTICS_HEADER);
        for (i, r) in rewards.iter().enumerate() {
            diag.row(&[&(i + 1), &m, &16, &1.0, &0.5, &0, r]);
        }
        diag.write(&dir.join(art::diagnostics_csv(m))).unwrap();
    }

    #[test]
    fn single_method_summary() {
        let dir = tempfile::tempdir().unwrap();
        write_method(dir.path(), "cgru", 0.95, &[5.0, 7.5]);
        let r = emit_report(dir.path()).unwrap();
        assert_eq!(
            r.rows,
            vec![SummaryRow { method: Method::Cgru, epoch: 2, final_reward: 7.5, ua: 0.95, ira: 0.8, fd: 2.5 }]
        );
        assert_eq!(r.curves.len(), 2);
        let text = fs::read_to_string(dir.path().join(SUMMARY_CSV)).unwrap();
        assert_eq!(text, "method,epoch,final_reward,ua,ira,fd\ncgru,2,7.5,0.95,0.8,2.5\n");
        assert!(r.to_string().contains("cgru"));
    }

    #[test]
    fn two_methods_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        write_method(dir.path(), "cgru", 0.95, &[5.0, 7.5]);
        write_method(dir.path(), "ddpo", 0.1, &[5.0, 5.1]);
        let r = emit_report(dir.path()).unwrap();
        let methods: Vec<Method> = r.rows.iter().map(|r| r.method).collect();
        assert_eq!(methods, vec![Method::Cgru, Method::Ddpo]);
        let curves = fs::read_to_string(dir.path().join(CURVES_CSV)).unwrap();
        assert_eq!(curves.lines().count(), 5);
    }

    #[test]
    fn missing_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        match emit_report(dir.path()) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("metrics_cgru.csv")),
            other => panic!("{other:?}"),
        }
        fs::write(dir.path().join(art::unlearned_ckpt("ddpo")), b"x").unwrap();
        match emit_report(dir.path()) {
            Err(Error::MissingArtifact(p)) => assert!(p.ends_with("metrics_ddpo.csv")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_method(dir.path(), "cgru", 0.95, &[5.0]);
        fs::write(dir.path().join(art::metrics_csv("cgru")), "a,b\n1,2\n").unwrap();
        assert!(matches!(emit_report(dir.path()), Err(Error::Malformed { .. })));
    }
}

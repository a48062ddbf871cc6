//! Result tables: held-out accuracy per domain plus an average column, in
//! human-readable and tab-separated form.

use serde::{Deserialize, Serialize};
use sda_core::training::EvalReport;

use crate::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    /// (domain, accuracy) in domain order.
    pub domains: Vec<(String, f64)>,
    /// Mean of the per-domain accuracies.
    pub average: f64,
    /// Micro accuracy over all instances.
    pub overall: f64,
    pub total: usize,
}

impl EvalRow {
    pub fn from_report(model: &str, report: &EvalReport) -> Self {
        let domains: Vec<(String, f64)> = report.per_domain.iter().map(|d| (d.domain.clone(), d.accuracy)).collect();
        let average = if domains.is_empty() {
            f64::NAN
        } else {
            domains.iter().map(|d| d.1).sum::<f64>() / domains.len() as f64
        };
        Self {
            model: model.to_owned(),
            domains,
            average,
            overall: report.accuracy,
            total: report.total,
        }
    }

    fn columns(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.0.clone()).collect()
    }
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let width: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| if i == 0 { format!("{c:<w$}", w = width[i]) } else { format!("{c:>w$}", w = width[i]) })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

/// Accuracy in percent: one column per domain, then Average.
pub fn eval_table(rows: &[EvalRow]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let mut header = vec!["model".to_owned()];
    header.extend(first.columns());
    header.push("Average".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.model.clone()];
            cells.extend(r.domains.iter().map(|d| pct(d.1)));
            cells.push(pct(r.average));
            cells
        })
        .collect();
    render(&header, &body)
}

pub fn eval_tsv(rows: &[EvalRow]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let mut out = format!("model\t{}\taverage\n", first.columns().join("\t"));
    for r in rows {
        let cells: Vec<String> = r.domains.iter().map(|d| d.1.to_string()).collect();
        out.push_str(&format!("{}\t{}\t{}\n", r.model, cells.join("\t"), r.average));
    }
    out
}

/// Mean and sample standard deviation per column over runs of one model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub model: String,
    pub runs: usize,
    pub columns: Vec<(String, f64, f64)>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// Group rows by model and summarize. All rows of a model must have the
/// same domain columns.
pub fn summarize(rows: &[EvalRow]) -> Result<Vec<SummaryRow>> {
    let mut models: Vec<&str> = Vec::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
    }
    models
        .into_iter()
        .map(|m| {
            let group: Vec<&EvalRow> = rows.iter().filter(|r| r.model == m).collect();
            let cols = group[0].columns();
            if group.iter().any(|r| r.columns() != cols) {
                return Err(CliError::Run(format!("runs of {m} were evaluated on different domains")));
            }
            let mut columns: Vec<(String, f64, f64)> = cols
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let (mu, sd) = mean_std(&group.iter().map(|r| r.domains[i].1).collect::<Vec<_>>());
                    (c.clone(), mu, sd)
                })
                .collect();
            let (mu, sd) = mean_std(&group.iter().map(|r| r.average).collect::<Vec<_>>());
            columns.push(("Average".into(), mu, sd));
            Ok(SummaryRow {
                model: m.to_owned(),
                runs: group.len(),
                columns,
            })
        })
        .collect()
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let Some(first) = rows.first() else { return String::new() };
    let mut header = vec!["model".to_owned(), "runs".to_owned()];
    header.extend(first.columns.iter().map(|c| c.0.clone()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![r.model.clone(), r.runs.to_string()];
            cells.extend(r.columns.iter().map(|c| format!("{} ± {}", pct(c.1), pct(c.2))));
            cells
        })
        .collect();
    render(&header, &body)
}

pub fn summary_tsv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("model\truns\tcolumn\tmean\tstd\n");
    for r in rows {
        for (c, mu, sd) in &r.columns {
            out.push_str(&format!("{}\t{}\t{c}\t{mu}\t{sd}\n", r.model, r.runs));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(model: &str, accs: &[f64]) -> EvalRow {
        let domains: Vec<(String, f64)> = accs.iter().enumerate().map(|(i, &a)| (format!("d{i}"), a)).collect();
        EvalRow {
            model: model.into(),
            average: accs.iter().sum::<f64>() / accs.len() as f64,
            domains,
            overall: 0.0,
            total: 10,
        }
    }

    #[test]
    fn four_domains_give_five_columns() {
        let t = eval_table(&[row("csda-dirichlet", &[0.8, 0.9, 0.7, 0.6])]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["model", "d0", "d1", "d2", "d3", "Average"]);
        assert!(t.contains("75.0"));
        let tsv = eval_tsv(&[row("x", &[0.5, 1.0])]);
        assert_eq!(tsv, "model\td0\td1\taverage\nx\t0.5\t1\t0.75\n");
    }

    #[test]
    fn summary_mean_and_std() {
        let s = summarize(&[row("a", &[0.5]), row("a", &[0.7]), row("b", &[0.6])]).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].runs, 2);
        assert!((s[0].columns[0].1 - 0.6).abs() < 1e-12);
        assert!((s[0].columns[0].2 - 0.1414213562373095).abs() < 1e-12);
        assert_eq!(s[1].columns[0].2, 0.0);
        assert!(summarize(&[row("a", &[0.5]), row("a", &[0.5, 0.5])]).is_err());
    }
}

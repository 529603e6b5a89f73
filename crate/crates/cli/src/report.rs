//! Consolidated comparison table built from per-method eval rows.
//!
//! Numbers are copied from the eval CSVs as text, never reparsed and
//! reformatted, so the report matches its inputs exactly.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{CliError, Result};
use crate::fsio;
use crate::pipeline::{Method, EVAL_HEADER};

pub const REPORT_HEADER: &str = "method,f1,accuracy,precision,recall,epsilon,nu";
const COLUMNS: [&str; 6] = ["f1", "accuracy", "precision", "recall", "epsilon", "nu"];
const ABSENT: &str = "-";

/// Fields of one eval row, keyed by column name.
pub type Row = BTreeMap<String, String>;

pub fn parse_eval_csv(text: &str, origin: &str) -> Result<Row> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != EVAL_HEADER {
        return Err(CliError::Data(format!("{origin}: unexpected eval header `{header}`")));
    }
    let line = lines
        .next()
        .ok_or_else(|| CliError::Data(format!("{origin}: missing eval row")))?;
    let fields: Vec<&str> = line.split(',').collect();
    let names: Vec<&str> = EVAL_HEADER.split(',').collect();
    if fields.len() != names.len() {
        return Err(CliError::Data(format!(
            "{origin}: expected {} fields, found {}",
            names.len(),
            fields.len()
        )));
    }
    Ok(names.iter().zip(fields).map(|(n, f)| (n.to_string(), f.to_string())).collect())
}

/// Reads `<dir>/<method>.eval.csv` for every method; missing files give `None`.
pub fn collect(dir: &Path) -> Result<Vec<(Method, Option<Row>)>> {
    Method::ALL
        .into_iter()
        .map(|m| {
            let p = dir.join(format!("{}.eval.csv", m.name()));
            if !p.exists() {
                return Ok((m, None));
            }
            let text = fsio::read_text(&p)?;
            Ok((m, Some(parse_eval_csv(&text, &p.display().to_string())?)))
        })
        .collect()
}

fn cell(row: Option<&Row>, col: &str) -> String {
    match row.and_then(|r| r.get(col)) {
        Some(v) if !v.is_empty() => v.clone(),
        _ => ABSENT.to_string(),
    }
}

pub fn report_csv(rows: &[(Method, Option<Row>)]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for (m, row) in rows {
        let fields: Vec<String> = COLUMNS.iter().map(|c| cell(row.as_ref(), c)).collect();
        s.push_str(&format!("{},{}\n", m.title(), fields.join(",")));
    }
    s
}

/// Fixed-width text table; metrics are rounded to three decimals for display.
pub fn report_table(rows: &[(Method, Option<Row>)]) -> String {
    let head = ["Method", "F1", "Accuracy", "Precision", "Recall", "epsilon", "nu"];
    let mut body: Vec<Vec<String>> = vec![head.iter().map(|h| h.to_string()).collect()];
    for (m, row) in rows {
        let mut r = vec![m.title().to_string()];
        for (i, c) in COLUMNS.iter().enumerate() {
            let v = cell(row.as_ref(), c);
            let shown = match v.parse::<f64>() {
                Ok(x) if i < 4 => format!("{x:.3}"),
                _ => v,
            };
            r.push(shown);
        }
        body.push(r);
    }
    let widths: Vec<usize> = (0..head.len())
        .map(|j| body.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for (i, r) in body.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(j, v)| if j == 0 { format!("{v:<w$}", w = widths[j]) } else { format!("{v:>w$}", w = widths[j]) })
            .collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
        if i == 0 {
            s.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            s.push('\n');
        }
    }
    s
}

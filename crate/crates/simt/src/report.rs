//! Consolidated CSV / Markdown tables over a run's evaluation reports.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::files::write_text;
use crate::pipeline::{read_json, EvalReport, EvalRow, ReferenceAnalysis};

/// Column order of every metrics table.
pub const COLUMNS: [&str; 8] = ["system", "k", "bleu", "al", "ar", "hr", "n_sentences", "flag"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

fn flag(r: &EvalRow) -> &'static str {
    if [r.bleu, r.al, r.ar, r.hr].iter().any(Option::is_none) {
        "missing_metric"
    } else {
        ""
    }
}

fn fields(r: &EvalRow) -> [String; 8] {
    [
        r.system.clone(),
        r.k.to_string(),
        cell(r.bleu),
        cell(r.al),
        cell(r.ar),
        cell(r.hr),
        r.n_sentences.to_string(),
        flag(r).to_owned(),
    ]
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut out = COLUMNS.join(",") + "\n";
    for r in rows {
        out.push_str(&fields(r).join(","));
        out.push('\n');
    }
    out
}

fn markdown(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}

fn json_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(prefix))
        })
        .collect();
    v.sort();
    Ok(v)
}

/// What `report` produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<EvalRow>,
    pub references: Vec<ReferenceAnalysis>,
    pub warnings: Vec<String>,
}

/// Merges `eval/*.json` (and any `references_k*.json`) into `report.csv`
/// and `report.md`. Rows are ordered by latency, then system name.
pub fn report(run_dir: &Path) -> Result<Summary> {
    let files = json_files(&run_dir.join("eval"), "")?;
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no evaluation reports under `{}`; run `eval` first",
            run_dir.join("eval").display()
        )));
    }
    let mut rows = Vec::new();
    for f in &files {
        let r: EvalReport = read_json(f)?;
        rows.extend(r.rows);
    }
    rows.sort_by(|a, b| (a.k, &a.system).cmp(&(b.k, &b.system)));
    let warnings: Vec<String> = rows
        .iter()
        .filter(|r| !flag(r).is_empty())
        .map(|r| format!("{} at k={} lacks at least one metric", r.system, r.k))
        .collect();
    let mut references: Vec<ReferenceAnalysis> = json_files(run_dir, "references_k")?
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_>>()?;
    references.sort_by_key(|r| r.k);

    write_text(&run_dir.join("report.csv"), &rows_to_csv(&rows))?;
    let table: Vec<Vec<String>> = rows.iter().map(|r| fields(r).to_vec()).collect();
    let mut md = String::from("## Test-set metrics\n\n") + &markdown(&COLUMNS, &table);
    if !references.is_empty() {
        let header = [
            "k",
            "n_sentences",
            "ar_ground_truth",
            "ar_naref",
            "ar_tailored",
            "bleu_naref",
            "bleu_tailored",
            "fallback_rate",
        ];
        let table: Vec<Vec<String>> = references
            .iter()
            .map(|r| {
                vec![
                    r.k.to_string(),
                    r.n_sentences.to_string(),
                    format!("{:.4}", r.ar_ground_truth),
                    cell(r.ar_naref),
                    cell(r.ar_tailored),
                    format!("{:.4}", r.bleu_naref),
                    format!("{:.4}", r.bleu_tailored),
                    format!("{:.4}", r.fallback_rate),
                ]
            })
            .collect();
        md.push_str("\n## Training references\n\n");
        md.push_str(&markdown(&header, &table));
    }
    write_text(&run_dir.join("report.md"), &md)?;
    Ok(Summary {
        rows,
        references,
        warnings,
    })
}

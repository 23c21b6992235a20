//! Result tables: CSV for machines, aligned text for people.

use std::path::Path;

use vpl_core::gmoe::GateStats;
use vpl_core::trainlab::EvalResult;

pub const RESULTS_HEADER: [&str; 7] =
    ["method", "total_params_multiplier", "dataset", "split", "accuracy", "auroc", "seed"];
pub const GATES_HEADER: [&str; 4] = ["gate", "mean", "min", "max"];

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub multiplier: f64,
    pub dataset: String,
    pub split: String,
    pub accuracy: f64,
    pub auroc: Option<f64>,
    pub seed: String,
}

impl ResultRow {
    pub fn from_eval(method: &str, multiplier: f64, dataset: &str, eval: &EvalResult, seed: u64) -> Self {
        Self {
            method: method.to_string(),
            multiplier,
            dataset: dataset.to_string(),
            split: eval.split.clone(),
            accuracy: eval.accuracy,
            auroc: eval.auroc,
            seed: seed.to_string(),
        }
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.method.clone(),
            format!("{:.4}", self.multiplier),
            self.dataset.clone(),
            self.split.clone(),
            format!("{:.6}", self.accuracy),
            self.auroc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            self.seed.clone(),
        ]
    }
}

/// Mean accuracy and AUROC of several rows; AUROC only when every row has one.
pub fn mean_row(rows: &[ResultRow]) -> Option<ResultRow> {
    let first = rows.first()?;
    let n = rows.len() as f64;
    let auroc = rows.iter().map(|r| r.auroc).collect::<Option<Vec<f64>>>().map(|v| v.iter().sum::<f64>() / n);
    Some(ResultRow {
        accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
        auroc,
        seed: "mean".into(),
        ..first.clone()
    })
}

pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Pipe table with columns padded to equal width.
pub fn markdown(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header.to_vec());
    out.push_str(&format!("|{}|\n", width.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn results_csv(rows: &[ResultRow]) -> anyhow::Result<String> {
    csv_string(&RESULTS_HEADER, &rows.iter().map(ResultRow::cells).collect::<Vec<_>>())
}

pub fn results_markdown(rows: &[ResultRow]) -> String {
    markdown(&RESULTS_HEADER, &rows.iter().map(ResultRow::cells).collect::<Vec<_>>())
}

fn gate_cells(stats: &[GateStats]) -> Vec<Vec<String>> {
    stats
        .iter()
        .map(|s| vec![s.gate.clone(), format!("{:.6}", s.mean), format!("{:.6}", s.min), format!("{:.6}", s.max)])
        .collect()
}

pub fn gates_csv(stats: &[GateStats]) -> anyhow::Result<String> {
    csv_string(&GATES_HEADER, &gate_cells(stats))
}

pub fn gates_markdown(stats: &[GateStats]) -> String {
    markdown(&GATES_HEADER, &gate_cells(stats))
}

pub fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(acc: f64, auroc: Option<f64>) -> ResultRow {
        ResultRow {
            method: "adapter".into(),
            multiplier: 1.17,
            dataset: "d".into(),
            split: "test_seen".into(),
            accuracy: acc,
            auroc,
            seed: "0".into(),
        }
    }

    #[test]
    fn csv_header_is_stable() {
        let text = results_csv(&[row(0.5, None)]).unwrap();
        assert_eq!(text.lines().next().unwrap(), "method,total_params_multiplier,dataset,split,accuracy,auroc,seed");
        assert_eq!(text.lines().nth(1).unwrap(), "adapter,1.1700,d,test_seen,0.500000,,0");
    }

    #[test]
    fn mean_needs_every_auroc() {
        let m = mean_row(&[row(0.5, Some(0.6)), row(1.0, Some(0.8))]).unwrap();
        assert!((m.accuracy - 0.75).abs() < 1e-15);
        assert!((m.auroc.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(m.seed, "mean");
        assert_eq!(mean_row(&[row(0.5, Some(0.6)), row(1.0, None)]).unwrap().auroc, None);
        assert!(mean_row(&[]).is_none());
    }

    #[test]
    fn markdown_columns_align() {
        let md = markdown(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
        let widths: Vec<usize> = md.lines().map(str::len).collect();
        assert!(widths.iter().all(|&w| w == widths[0]), "{md}");
    }
}

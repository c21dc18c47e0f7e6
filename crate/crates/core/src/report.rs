//! Comparison tables over methods and seeds, as CSV and markdown.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Metric columns, in output order.
pub const METRICS: [(usize, f32); 4] = [(1, 0.5), (1, 0.7), (5, 0.5), (5, 0.7)];
pub const HEADER: [&str; 6] = ["method", "seed", "R@1@0.5", "R@1@0.7", "R@5@0.5", "R@5@0.7"];
pub const ABSENT: &str = "absent";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: String,
    pub seed: u64,
    /// Recall per entry of [`METRICS`]; `None` when not measured.
    pub recalls: [Option<f64>; 4],
}

pub struct Report {
    pub csv: String,
    pub markdown: String,
    /// Declared (method, seed) cells with no complete result.
    pub missing: Vec<(String, u64)>,
}

impl Report {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Builds the table for a declared grid of methods and seeds.
///
/// Rows follow the declared order; every method gets a `mean±std` row over
/// the seeds it has results for.
pub fn emit_report(methods: &[String], seeds: &[u64], results: &[RunResult]) -> Report {
    let mut rows: Vec<[String; 6]> = Vec::new();
    let mut missing = Vec::new();
    for method in methods {
        let mut per_metric: [Vec<f64>; 4] = Default::default();
        for &seed in seeds {
            let found = results.iter().find(|r| &r.method == method && r.seed == seed);
            let cells: [String; 4] = std::array::from_fn(|k| match found.and_then(|r| r.recalls[k]) {
                Some(v) => {
                    per_metric[k].push(v);
                    format!("{v:.2}")
                }
                None => ABSENT.to_string(),
            });
            if cells.iter().any(|c| c == ABSENT) {
                missing.push((method.clone(), seed));
            }
            let [a, b, c, d] = cells;
            rows.push([method.clone(), seed.to_string(), a, b, c, d]);
        }
        let summary: [String; 4] = std::array::from_fn(|k| {
            if per_metric[k].is_empty() {
                ABSENT.to_string()
            } else {
                let (m, s) = mean_std(&per_metric[k]);
                format!("{m:.2}±{s:.2}")
            }
        });
        let [a, b, c, d] = summary;
        rows.push([method.clone(), "mean±std".to_string(), a, b, c, d]);
    }

    let mut csv = HEADER.join(",");
    csv.push('\n');
    for r in &rows {
        csv.push_str(&r.join(","));
        csv.push('\n');
    }
    let mut markdown = format!("| {} |\n", HEADER.join(" | "));
    let _ = writeln!(markdown, "|{}", "---|".repeat(HEADER.len()));
    for r in &rows {
        let _ = writeln!(markdown, "| {} |", r.join(" | "));
    }
    Report {
        csv,
        markdown,
        missing,
    }
}

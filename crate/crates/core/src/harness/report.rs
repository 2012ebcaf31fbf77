//! Per-method comparison tables and the K sweep.

use std::collections::{BTreeMap, BTreeSet};

use super::config::{Method, TrainConfig};
use super::record::RunRecord;
use super::train::train_observed;
use crate::datagen::GroupedDataset;
use crate::error::{Error, Result};
use crate::exec::Execution;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    /// Aligned with [`ComparisonReport::groups`]; `None` when the run has no
    /// value for that group.
    pub group_accuracy: Vec<Option<f64>>,
    pub worst_group_accuracy: Option<f64>,
    pub overall_accuracy: Option<f64>,
}

/// Final accuracies, one row per run (or per aggregated setting).
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub groups: Vec<usize>,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self.groups.iter().map(|g| format!("group_{g}")).collect();
        cols.push("worst_group".into());
        cols.push("overall".into());
        cols
    }

    fn cells(row: &ReportRow) -> Vec<Option<f64>> {
        let mut cells = row.group_accuracy.clone();
        cells.push(row.worst_group_accuracy);
        cells.push(row.overall_accuracy);
        cells
    }

    /// `best[r][c]` is true when row `r` holds the highest value of column
    /// `c`. Ties are all flagged.
    pub fn best_flags(&self) -> Vec<Vec<bool>> {
        let table: Vec<Vec<Option<f64>>> = self.rows.iter().map(Self::cells).collect();
        let width = self.groups.len() + 2;
        let best: Vec<Option<f64>> = (0..width)
            .map(|c| {
                table
                    .iter()
                    .filter_map(|r| r[c])
                    .fold(None, |acc: Option<f64>, v| {
                        Some(acc.map_or(v, |a| a.max(v)))
                    })
            })
            .collect();
        table
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&best)
                    .map(|(v, b)| v.is_some() && *v == *b)
                    .collect()
            })
            .collect()
    }

    /// CSV with a trailing `best` column naming the columns each row wins.
    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let mut out = format!("method,{},best\n", cols.join(","));
        for (row, flags) in self.rows.iter().zip(self.best_flags()) {
            let cells: Vec<String> = Self::cells(row)
                .iter()
                .map(|v| v.map(|x| format!("{x:.4}")).unwrap_or_default())
                .collect();
            let won: Vec<&str> = cols
                .iter()
                .zip(&flags)
                .filter(|(_, &f)| f)
                .map(|(c, _)| c.as_str())
                .collect();
            out.push_str(&format!(
                "{},{},{}\n",
                row.label,
                cells.join(","),
                won.join(";")
            ));
        }
        out
    }

    /// Aligned plain-text table; winning cells carry a `*`.
    pub fn to_text(&self) -> String {
        let mut header = vec!["method".to_string()];
        header.extend(self.columns());
        let mut lines = vec![header];
        for (row, flags) in self.rows.iter().zip(self.best_flags()) {
            let mut line = vec![row.label.clone()];
            for (v, f) in Self::cells(row).iter().zip(flags) {
                line.push(match v {
                    Some(x) => format!("{:.4}{}", x, if f { "*" } else { " " }),
                    None => "-".into(),
                });
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for line in &lines {
            let cells: Vec<String> = line
                .iter()
                .enumerate()
                .map(|(c, s)| {
                    if c == 0 {
                        format!("{:<w$}", s, w = widths[c])
                    } else {
                        format!("{:>w$}", s, w = widths[c])
                    }
                })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

fn check_same_eval(records: &[RunRecord]) -> Result<()> {
    if let Some(first) = records.first() {
        for r in &records[1..] {
            if r.eval_fingerprint != first.eval_fingerprint {
                return Err(Error::MismatchedDatasets(
                    first.eval_fingerprint.clone(),
                    r.eval_fingerprint.clone(),
                ));
            }
        }
    }
    Ok(())
}

fn all_groups(records: &[RunRecord]) -> Vec<usize> {
    records
        .iter()
        .filter_map(|r| r.final_metrics())
        .flat_map(|m| m.per_group_accuracy.keys().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// One row per record with its final-epoch metrics.
pub fn compare(records: &[RunRecord]) -> Result<ComparisonReport> {
    check_same_eval(records)?;
    let groups = all_groups(records);
    let rows = records
        .iter()
        .map(|r| {
            let m = r.final_metrics();
            ReportRow {
                label: r.label(),
                group_accuracy: groups
                    .iter()
                    .map(|g| m.and_then(|m| m.per_group_accuracy.get(g).copied()))
                    .collect(),
                worst_group_accuracy: m.map(|m| m.worst_group_accuracy),
                overall_accuracy: m.map(|m| m.overall_accuracy),
            }
        })
        .collect();
    Ok(ComparisonReport { groups, rows })
}

/// Median of the present values; the mean of the middle pair for even
/// counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

/// Collapses several records into one row of medians.
pub fn median_row(label: &str, records: &[&RunRecord], groups: &[usize]) -> ReportRow {
    let finals: Vec<_> = records.iter().filter_map(|r| r.final_metrics()).collect();
    let column = |f: &dyn Fn(&super::metrics::EpochMetrics) -> Option<f64>| {
        median(&finals.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
    };
    ReportRow {
        label: label.to_string(),
        group_accuracy: groups
            .iter()
            .map(|g| column(&|m| m.per_group_accuracy.get(g).copied()))
            .collect(),
        worst_group_accuracy: column(&|m| Some(m.worst_group_accuracy)),
        overall_accuracy: column(&|m| Some(m.overall_accuracy)),
    }
}

/// Output of [`sweep_k`]: the median table plus every underlying run.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub report: ComparisonReport,
    /// `(k, runs)` per distinct K, ascending; runs are in seed order.
    pub resat_runs: Vec<(usize, Vec<RunRecord>)>,
    pub erm_runs: Vec<RunRecord>,
}

/// Trains Re-SAT for every distinct K and seed, plus one ERM run per seed,
/// and tabulates medians over seeds. Seed `s` shifts the shuffle seed by `s`
/// and initializes with `s`. Cells run in parallel.
pub fn sweep_k(
    base: &TrainConfig,
    train_data: &GroupedDataset,
    eval_data: &GroupedDataset,
    k_values: &[usize],
    seeds: &[u64],
    exec: Execution,
) -> Result<SweepResult> {
    let ks: Vec<usize> = k_values
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one K and one seed".into(),
        ));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > base.batch_size) {
        return Err(Error::InvalidK {
            k,
            n: base.batch_size,
        });
    }

    let mut cells: Vec<(Option<usize>, u64)> = Vec::new();
    for &seed in seeds {
        cells.push((None, seed));
        for &k in &ks {
            cells.push((Some(k), seed));
        }
    }
    let runs = exec.try_map(&cells, |_, &(k, seed)| {
        let mut config = base.clone();
        config.shuffle_seed = base.shuffle_seed.wrapping_add(seed);
        match k {
            Some(k) => {
                config.method = Method::ReSat;
                config.affinity.k_conflicting = k;
            }
            None => config.method = Method::Erm,
        }
        // cells already run in parallel
        train_observed(
            &config,
            train_data,
            eval_data,
            seed,
            &mut (),
            Execution::Sequential,
        )
    })?;

    let mut erm_runs = Vec::new();
    let mut by_k: BTreeMap<usize, Vec<RunRecord>> = BTreeMap::new();
    for ((k, _), run) in cells.into_iter().zip(runs) {
        match k {
            Some(k) => by_k.entry(k).or_default().push(run),
            None => erm_runs.push(run),
        }
    }
    let everything: Vec<RunRecord> = erm_runs
        .iter()
        .chain(by_k.values().flatten())
        .cloned()
        .collect();
    let groups = all_groups(&everything);
    let mut rows = vec![median_row(
        "erm",
        &erm_runs.iter().collect::<Vec<_>>(),
        &groups,
    )];
    for (k, runs) in &by_k {
        rows.push(median_row(
            &format!("re-sat(K={k})"),
            &runs.iter().collect::<Vec<_>>(),
            &groups,
        ));
    }
    Ok(SweepResult {
        report: ComparisonReport { groups, rows },
        resat_runs: by_k.into_iter().collect(),
        erm_runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(label: &str, groups: &[f64], worst: f64, overall: f64) -> ReportRow {
        ReportRow {
            label: label.into(),
            group_accuracy: groups.iter().map(|&g| Some(g)).collect(),
            worst_group_accuracy: Some(worst),
            overall_accuracy: Some(overall),
        }
    }

    #[test]
    fn winner_flags() {
        let report = ComparisonReport {
            groups: vec![0, 1],
            rows: vec![
                row("erm", &[0.5, 0.9], 0.5, 0.85),
                row("re-sat(K=4)", &[0.7, 0.9], 0.7, 0.84),
            ],
        };
        let flags = report.best_flags();
        assert_eq!(flags[0], vec![false, true, false, true]);
        assert_eq!(flags[1], vec![true, true, true, false]);
        let csv = report.to_csv();
        assert_eq!(
            csv.lines().next().unwrap(),
            "method,group_0,group_1,worst_group,overall,best"
        );
        assert!(csv.contains("re-sat(K=4),0.7000,0.9000,0.7000,0.8400,group_0;group_1;worst_group"));
        let text = report.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("0.7000*"));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}

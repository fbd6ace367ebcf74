use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mrcom::pipeline::Metrics;
use serde::{Deserialize, Serialize};

pub const METRICS_DIR: &str = "metrics";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SUMMARY_MD: &str = "summary.md";

/// One metrics line: a pipeline record tagged with its seed and row label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub seed: u64,
    /// Table row: a variant or a dataset-quality mode.
    pub group: String,
    /// Table column for evaluation lines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

impl Record {
    pub fn new(seed: u64, group: &str, split: Option<&str>, metrics: Metrics) -> Self {
        Self {
            seed,
            group: group.to_string(),
            split: split.map(str::to_string),
            metrics,
        }
    }

    pub fn eval(seed: u64, group: &str, split: &str, scenario_id: usize, normalized_return: f64) -> Self {
        Self::new(
            seed,
            group,
            Some(split),
            Metrics {
                phase: "eval".into(),
                scenario_id: Some(scenario_id),
                normalized_return: Some(normalized_return),
                ..Metrics::default()
            },
        )
    }
}

pub fn metrics_file(dir: &Path, group: &str, seed: u64) -> PathBuf {
    dir.join(METRICS_DIR).join(format!("{group}-seed{seed}.jsonl"))
}

/// Writes each record to the file of its (group, seed); one writer for the whole run.
pub fn write_metrics(dir: &Path, records: &[Record]) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join(METRICS_DIR))?;
    let mut files: BTreeMap<PathBuf, Vec<u8>> = BTreeMap::new();
    for r in records {
        let buf = files.entry(metrics_file(dir, &r.group, r.seed)).or_default();
        serde_json::to_writer(&mut *buf, r)?;
        buf.push(b'\n');
    }
    for (path, bytes) in &files {
        fs::File::create(path)?.write_all(bytes)?;
    }
    Ok(files.into_keys().collect())
}

pub fn read_metrics(path: &Path) -> Result<Vec<Record>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| format!("{}:{}: {e}", path.display(), i + 1)))
        .collect()
}

/// Every `*.jsonl` under the run's metrics directory, sorted by name.
pub fn metric_files(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir.join(METRICS_DIR))
        .into_iter()
        .flatten()
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    out.sort();
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub group: String,
    pub cells: Vec<Option<Stat>>,
}

/// Mean ± std over seeds, one row per group and one column per split or loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub title: String,
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Summary {
    /// Normalized returns of `eval` lines.
    pub fn of_evals(title: &str, records: &[Record], groups: &[String], columns: &[String]) -> Self {
        let mut cells: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.metrics.phase == "eval") {
            if let (Some(split), Some(v)) = (&r.split, r.metrics.normalized_return) {
                cells.entry((r.group.as_str(), split.as_str())).or_default().push(v);
            }
        }
        Self::build(title, groups, columns, |g, c| cells.get(&(g, c)).and_then(|xs| Stat::of(xs)))
    }

    /// Losses of the last `train` line of every (group, seed).
    pub fn of_final_losses(title: &str, records: &[Record], groups: &[String]) -> Self {
        let mut last: BTreeMap<(&str, u64), &Metrics> = BTreeMap::new();
        for r in records.iter().filter(|r| r.metrics.phase == "train") {
            last.insert((r.group.as_str(), r.seed), &r.metrics);
        }
        let columns: Vec<String> = LOSS_COLUMNS.iter().map(|s| s.to_string()).collect();
        Self::build(title, groups, &columns, |g, c| {
            let xs: Vec<f64> = last.iter().filter(|((k, _), _)| *k == g).filter_map(|(_, m)| loss(m, c)).collect();
            Stat::of(&xs)
        })
    }

    fn build(title: &str, groups: &[String], columns: &[String], mut cell: impl FnMut(&str, &str) -> Option<Stat>) -> Self {
        let rows = groups
            .iter()
            .map(|g| Row {
                group: g.clone(),
                cells: columns.iter().map(|c| cell(g, c)).collect(),
            })
            .collect();
        Self {
            title: title.to_string(),
            columns: columns.to_vec(),
            rows,
        }
    }

    pub fn markdown(&self) -> String {
        let mut s = format!("# {}\n\n| method |", self.title);
        for c in &self.columns {
            s.push_str(&format!(" {c} |"));
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("| {} |", r.group));
            for c in &r.cells {
                match c {
                    Some(st) => s.push_str(&format!(" {:.2}±{:.2} |", st.mean, st.std)),
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::write(dir.join(SUMMARY_JSON), serde_json::to_string_pretty(self)? + "\n")?;
        fs::write(dir.join(SUMMARY_MD), self.markdown())
    }
}

pub const LOSS_COLUMNS: [&str; 4] = ["loss_var", "loss_s", "loss_v", "loss_total"];

pub fn loss(m: &Metrics, name: &str) -> Option<f64> {
    match name {
        "loss_var" => m.loss_var,
        "loss_s" => m.loss_s,
        "loss_v" => m.loss_v,
        "loss_total" => m.loss_total,
        "value_loss_i" => m.value_loss_i,
        "value_loss_meta" => m.value_loss_meta,
        "critic_loss" => m.critic_loss,
        "actor_loss" => m.actor_loss,
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stat_matches_hand_values() {
        let s = Stat::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Stat::of(&[7.0]).unwrap().std, 0.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn eval_summary_groups_by_row_and_column() {
        let recs = vec![
            Record::eval(0, "full", "in_distribution", 1000, 50.0),
            Record::eval(1, "full", "in_distribution", 1000, 70.0),
            Record::eval(0, "full", "ood", 2000, 30.0),
            Record::eval(0, "wo_c", "in_distribution", 1000, 10.0),
        ];
        let groups = vec!["full".to_string(), "wo_c".to_string()];
        let cols = vec!["in_distribution".to_string(), "ood".to_string()];
        let s = Summary::of_evals("t", &recs, &groups, &cols);
        assert_eq!(s.rows[0].cells[0].unwrap().mean, 60.0);
        assert_eq!(s.rows[0].cells[1].unwrap().n, 1);
        assert!(s.rows[1].cells[1].is_none());
        let md = s.markdown();
        assert!(md.contains("| full | 60.00±14.14 | 30.00±0.00 |"), "{md}");
        assert!(md.contains("| wo_c | 10.00±0.00 | - |"), "{md}");
    }

    #[test]
    fn loss_summary_uses_last_train_line() {
        let line = |seed, iter, total| {
            Record::new(
                seed,
                "full",
                None,
                Metrics {
                    phase: "train".into(),
                    iter,
                    loss_total: Some(total),
                    ..Metrics::default()
                },
            )
        };
        let recs = vec![line(0, 0, 9.0), line(0, 1, 3.0), line(1, 0, 5.0)];
        let s = Summary::of_final_losses("t", &recs, &["full".to_string()]);
        assert_eq!(s.rows[0].cells[3].unwrap().mean, 4.0);
        assert!(s.rows[0].cells[0].is_none());
    }

    #[test]
    fn metrics_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![Record::eval(3, "full", "ood", 2000, 12.5), Record::eval(3, "full", "in_distribution", 1000, 40.0)];
        let files = write_metrics(dir.path(), &recs).unwrap();
        assert_eq!(files, vec![metrics_file(dir.path(), "full", 3)]);
        assert_eq!(metric_files(dir.path()), files);
        assert_eq!(read_metrics(&files[0]).unwrap(), recs);
    }
}

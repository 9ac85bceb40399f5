//! Aggregation of run reports into a CSV table and an SVG bar chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::pipeline::{RunReport, REPORT_VERSION};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report {path} has schema version {got}, expected {want}")]
    VersionMismatch { path: String, got: u32, want: u32 },
    #[error("report {0} contains no episodes")]
    EmptyEpisodes(String),
    #[error("no reports given")]
    NoReports,
}

pub struct Aggregate {
    pub csv: String,
    pub svg: String,
}

#[derive(Default, Clone)]
struct Bucket {
    episodes: usize,
    successes: usize,
    makespan_sum: f64,
    collision_episodes: usize,
}

/// Aggregate per (task, mode): success rate, mean makespan, collision rate.
/// Rows are ordered deterministically.
pub fn aggregate(paths: &[&Path]) -> Result<Aggregate, ReportError> {
    if paths.is_empty() {
        return Err(ReportError::NoReports);
    }
    let mut buckets: BTreeMap<(String, String), Bucket> = BTreeMap::new();
    for path in paths {
        let report = RunReport::load(path).map_err(|e| match e {
            crate::pipeline::PipelineError::Json(j) => ReportError::Json(j),
            crate::pipeline::PipelineError::Io(i) => ReportError::Io(i),
            other => ReportError::Io(std::io::Error::other(other.to_string())),
        })?;
        if report.version != REPORT_VERSION {
            return Err(ReportError::VersionMismatch {
                path: path.display().to_string(),
                got: report.version,
                want: REPORT_VERSION,
            });
        }
        if report.episodes.is_empty() {
            return Err(ReportError::EmptyEpisodes(path.display().to_string()));
        }
        let b = buckets.entry((report.task.clone(), report.mode.clone())).or_default();
        b.episodes += report.episodes.len();
        b.successes += report.episodes.iter().filter(|e| e.success).count();
        b.makespan_sum += report.episodes.iter().map(|e| e.makespan).sum::<f64>();
        b.collision_episodes += report.episodes.iter().filter(|e| e.collisions > 0).count();
    }

    let mut csv = String::from("task,mode,episodes,success_rate,mean_makespan,collision_rate\n");
    for ((task, mode), b) in &buckets {
        let _ = writeln!(
            csv,
            "{task},{mode},{},{:.4},{:.4},{:.4}",
            b.episodes,
            b.successes as f64 / b.episodes as f64,
            b.makespan_sum / b.episodes as f64,
            b.collision_episodes as f64 / b.episodes as f64,
        );
    }

    let svg = bar_chart(&buckets);
    Ok(Aggregate { csv, svg })
}

fn bar_chart(buckets: &BTreeMap<(String, String), Bucket>) -> String {
    let n = buckets.len().max(1);
    let bar_w = 60.0;
    let gap = 20.0;
    let width = (n as f64 * (bar_w + gap) + gap).max(200.0);
    let height = 220.0;
    let plot_h = 150.0;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">"
    );
    let _ = write!(
        svg,
        "<rect x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"#ffffff\"/>"
    );
    let _ = write!(
        svg,
        "<line x1=\"{gap:.0}\" y1=\"{:.0}\" x2=\"{:.0}\" y2=\"{:.0}\" stroke=\"#333333\"/>",
        plot_h + 20.0,
        width - gap / 2.0,
        plot_h + 20.0
    );
    for (i, ((task, mode), b)) in buckets.iter().enumerate() {
        let rate = b.successes as f64 / b.episodes as f64;
        let h = rate * plot_h;
        let x = gap + i as f64 * (bar_w + gap);
        let y = 20.0 + plot_h - h;
        let color = if mode == "full" { "#4363d8" } else { "#f58231" };
        let _ = write!(
            svg,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"{color}\"/>"
        );
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"9\" text-anchor=\"middle\">{:.0}%</text>",
            x + bar_w / 2.0,
            y - 4.0,
            rate * 100.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"8\" text-anchor=\"middle\">{task}</text>",
            x + bar_w / 2.0,
            plot_h + 32.0
        );
        let _ = write!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"8\" text-anchor=\"middle\">{mode}</text>",
            x + bar_w / 2.0,
            plot_h + 42.0
        );
    }
    svg.push_str("</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{EpisodeResult, RunReport, Summary};

    fn report(task: &str, mode: &str, outcomes: &[bool]) -> RunReport {
        let episodes: Vec<EpisodeResult> = outcomes
            .iter()
            .enumerate()
            .map(|(i, &success)| EpisodeResult {
                index: i,
                success,
                reasons: vec![],
                collisions: 0,
                makespan: 4.0,
                vlm_fallback: None,
            })
            .collect();
        let summary = crate::pipeline::summarize(&episodes);
        RunReport {
            version: 1,
            task: task.into(),
            mode: mode.into(),
            oracle_flows: true,
            seed: 0,
            episodes,
            summary: Summary { ..summary },
        }
    }

    #[test]
    fn single_all_success_is_100_percent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        report("packing", "full", &[true, true]).save(&p).unwrap();
        let agg = aggregate(&[p.as_path()]).unwrap();
        assert!(agg.csv.contains("packing,full,2,1.0000,4.0000,0.0000"));
        assert!(agg.svg.contains("100%"));
    }

    #[test]
    fn mixed_three_success_one_fail_is_75_percent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        report("pouring", "full", &[true, true, true, false]).save(&p).unwrap();
        let agg = aggregate(&[p.as_path()]).unwrap();
        assert!(agg.csv.contains("pouring,full,4,0.7500,4.0000,0.0000"), "{}", agg.csv);
    }

    #[test]
    fn empty_episode_set_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        report("packing", "full", &[]).save(&p).unwrap();
        assert!(matches!(aggregate(&[p.as_path()]), Err(ReportError::EmptyEpisodes(_))));
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let mut r = report("packing", "full", &[true]);
        r.version = 9;
        r.save(&p).unwrap();
        assert!(matches!(aggregate(&[p.as_path()]), Err(ReportError::VersionMismatch { .. })));
    }

    #[test]
    fn aggregation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        report("packing", "full", &[true]).save(&p1).unwrap();
        report("pouring", "no_allocation", &[false]).save(&p2).unwrap();
        let a = aggregate(&[p1.as_path(), p2.as_path()]).unwrap();
        let b = aggregate(&[p2.as_path(), p1.as_path()]).unwrap();
        assert_eq!(a.csv, b.csv);
        assert_eq!(a.svg, b.svg);
    }
}

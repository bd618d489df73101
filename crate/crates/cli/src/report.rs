//! Aggregated result tables and learning-curve plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tasklab::evaluator::{aggregate_report, matrix_from_records, read_eval_records, EvalRecord};
use tasklab::trainer::read_metrics;
use walkdir::WalkDir;

use crate::error::{CliError, CliResult};
use crate::pipeline::{EVAL_CSV, EVAL_TRAIN_CSV};

pub const DEFAULT_TOP_N: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: String,
    pub scenario: String,
    pub split: String,
    pub seeds: usize,
    pub sets: usize,
    pub top_n: usize,
    pub rate: f64,
    pub sd: f64,
}

impl ReportRow {
    /// Percentages with one decimal, as in `25.8 ± 1.2`.
    pub fn display_rate(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.rate, 100.0 * self.sd)
    }
}

/// Seed-averaged test success against training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub mode: String,
    pub scenario: String,
    pub points: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub curves: Vec<Curve>,
}

const MODE_ORDER: [&str; 8] = [
    "one_hot",
    "one_hot_oracle",
    "language_only",
    "demo_only",
    "bcz",
    "mcil",
    "mcil_demo_only",
    "deltaco",
];

fn mode_key(mode: &str) -> (usize, u64, String) {
    let rank = MODE_ORDER
        .iter()
        .position(|m| *m == mode)
        .unwrap_or(MODE_ORDER.len());
    let ft = mode
        .rsplit_once("_ft")
        .and_then(|(_, n)| n.parse().ok())
        .unwrap_or(0);
    (rank, ft, mode.to_string())
}

type GroupKey = (String, u8, (usize, u64, String));

/// Read every evaluation CSV below `roots` and aggregate per (mode, scenario, split).
pub fn build_report(roots: &[PathBuf], top_n: usize) -> CliResult<Report> {
    if top_n == 0 {
        return Err(CliError::Usage("top-n must be at least 1".into()));
    }
    let mut groups: BTreeMap<GroupKey, Vec<EvalRecord>> = BTreeMap::new();
    let mut curve_points: BTreeMap<(String, (usize, u64, String)), BTreeMap<u64, Vec<f64>>> =
        BTreeMap::new();
    for root in roots {
        if !root.exists() {
            return Err(CliError::Data(format!("{} does not exist", root.display())));
        }
        for entry in WalkDir::new(root).sort_by_file_name() {
            let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
            let name = entry.file_name().to_string_lossy();
            let split = match name.as_ref() {
                EVAL_CSV => 0u8,
                EVAL_TRAIN_CSV => 1u8,
                _ => continue,
            };
            let path = entry.path();
            let recs = read_eval_records(path)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if split == 0 {
                if let Some(first) = recs.first() {
                    let metrics = path.with_file_name("metrics.csv");
                    if metrics.exists() {
                        let rows = read_metrics(&metrics)
                            .map_err(|e| CliError::Data(format!("{}: {e}", metrics.display())))?;
                        let series = curve_points
                            .entry((first.scenario.clone(), mode_key(&first.mode)))
                            .or_default();
                        for r in rows {
                            if let Some(s) = r.test_success {
                                series.entry(r.step).or_default().push(s);
                            }
                        }
                    }
                }
            }
            for r in recs {
                groups
                    .entry((r.scenario.clone(), split, mode_key(&r.mode)))
                    .or_default()
                    .push(r);
            }
        }
    }
    let mut rows = Vec::new();
    for ((scenario, split, mode), recs) in &groups {
        let refs: Vec<&EvalRecord> = recs.iter().collect();
        let m = matrix_from_records(&refs)
            .map_err(|e| CliError::Data(format!("{} on {scenario}: {e}", mode.2)))?;
        let stats = aggregate_report(&m, top_n)?;
        rows.push(ReportRow {
            mode: mode.2.clone(),
            scenario: scenario.clone(),
            split: if *split == 0 { "test" } else { "train" }.into(),
            seeds: m.num_seeds(),
            sets: m.num_sets(),
            top_n: top_n.min(m.num_sets()),
            rate: stats.reported_rate,
            sd: stats.reported_sd,
        });
    }
    let curves = curve_points
        .into_iter()
        .map(|((scenario, mode), pts)| Curve {
            mode: mode.2,
            scenario,
            points: pts
                .into_iter()
                .map(|(s, v)| (s, v.iter().sum::<f64>() / v.len() as f64))
                .collect(),
        })
        .collect();
    Ok(Report { rows, curves })
}

pub fn markdown_table(rows: &[ReportRow]) -> String {
    let mut s = String::from(
        "| mode | scenario | split | seeds | sets | success (%) |\n|---|---|---|---|---|---|\n",
    );
    for r in rows {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} |",
            r.mode,
            r.scenario,
            r.split,
            r.seeds,
            r.sets,
            r.display_rate()
        )
        .unwrap();
    }
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Line plot of success rate (percent) against step, one series per curve.
pub fn render_svg(title: &str, curves: &[Curve]) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (64.0, 190.0, 40.0, 56.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let steps = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0));
    let (x0, x1) = steps.fold((u64::MAX, 0), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let (x0, x1) = if x0 > x1 {
        (0.0, 1.0)
    } else if x0 == x1 {
        (x0 as f64 - 1.0, x1 as f64 + 1.0)
    } else {
        (x0 as f64, x1 as f64)
    };
    let peak = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.1))
        .fold(0.0, f64::max);
    let y1 = ((peak * 10.0).ceil() / 10.0).clamp(0.1, 1.0);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + ph - y / y1 * ph;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    )
    .unwrap();
    for i in 0..=5 {
        let y = y1 * i as f64 / 5.0;
        let yy = py(y);
        writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{yy:.1}" x2="{:.1}" y2="{yy:.1}" stroke="#dddddd"/>"##,
            left + pw
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.0}</text>"#,
            left - 6.0,
            yy + 4.0,
            100.0 * y
        )
        .unwrap();
        let x = x0 + (x1 - x0) * i as f64 / 5.0;
        let xx = px(x);
        writeln!(
            s,
            r##"<line x1="{xx:.1}" y1="{:.1}" x2="{xx:.1}" y2="{:.1}" stroke="#000000"/>"##,
            top + ph,
            top + ph + 4.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{xx:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            top + ph + 18.0,
            x
        )
        .unwrap();
    }
    writeln!(s, r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#000000"/>"##).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">training step</text>"#,
        left + pw / 2.0,
        h - 14.0
    )
    .unwrap();
    writeln!(s, r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">success (%)</text>"#, top + ph / 2.0, top + ph / 2.0).unwrap();
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x as f64), py(y)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        for &(x, y) in &c.points {
            writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#,
                px(x as f64),
                py(y)
            )
            .unwrap();
        }
        let ly = top + 12.0 + 18.0 * i as f64;
        let lx = left + pw + 14.0;
        writeln!(s, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0).unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&c.mode)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Write `summary.csv`, `summary.md` and one `curves_<scenario>.svg` per
/// scenario with learning curves.
pub fn write_report(report: &Report, out: &Path) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut files: Vec<(PathBuf, String)> = Vec::new();
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    for r in &report.rows {
        csv_out.serialize(r)?;
    }
    let bytes = csv_out
        .into_inner()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    files.push((
        out.join("summary.csv"),
        String::from_utf8(bytes).expect("csv is UTF-8"),
    ));
    files.push((out.join("summary.md"), markdown_table(&report.rows)));
    let mut by_scenario: BTreeMap<&str, Vec<Curve>> = BTreeMap::new();
    for c in &report.curves {
        by_scenario.entry(&c.scenario).or_default().push(c.clone());
    }
    for (scenario, curves) in by_scenario {
        let title = format!("Test success, scenario {scenario}");
        files.push((
            out.join(format!("curves_{scenario}.svg")),
            render_svg(&title, &curves),
        ));
    }
    if let Some((p, _)) = files.iter().find(|(p, _)| p.exists()) {
        return Err(CliError::Usage(format!(
            "{} exists; report outputs are write-once",
            p.display()
        )));
    }
    for (p, body) in files {
        std::fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finetune_labels_sort_numerically() {
        let mut v = vec![
            "demo_only_ft25",
            "deltaco",
            "demo_only_ft5",
            "one_hot",
            "demo_only_ft0",
        ];
        v.sort_by_key(|m| mode_key(m));
        assert_eq!(
            v,
            [
                "one_hot",
                "deltaco",
                "demo_only_ft0",
                "demo_only_ft5",
                "demo_only_ft25"
            ]
        );
    }

    #[test]
    fn svg_is_well_formed_and_stable() {
        let c = Curve {
            mode: "a<b".into(),
            scenario: "mini".into(),
            points: vec![(2, 0.1), (4, 0.25)],
        };
        let s = render_svg("t", std::slice::from_ref(&c));
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s.matches("<circle").count(), 2);
        assert_eq!(s, render_svg("t", &[c]));
        assert!(render_svg("empty", &[]).contains("</svg>"));
    }
}

//! CSV, Markdown and SVG reports over finished runs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use scalessl_core::evalkit::{write_rows_csv, EvalRow};

use crate::sweep::{aggregate, AggregateRow, RunRecord, RunStatus};
use crate::HarnessError;

pub const RESULTS_CSV: &str = "results.csv";
pub const RUNS_CSV: &str = "runs.csv";
pub const REPORT_MD: &str = "report.md";
pub const DICE_SVG: &str = "dice_vs_patch.svg";
pub const HD_SVG: &str = "hd_vs_patch.svg";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub results_csv: PathBuf,
    pub runs_csv: PathBuf,
    pub markdown: PathBuf,
    pub plots: Vec<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Dice,
    Hd,
}

impl Metric {
    fn of(self, r: &AggregateRow) -> f64 {
        match self {
            Metric::Dice => r.dice,
            Metric::Hd => r.hd,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Hd => "Hausdorff distance (px)",
        }
    }
}

/// One plotted curve: `(divisor, value)` points in divisor order.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

fn divisor_value(label: &str) -> Option<usize> {
    label.strip_prefix("L/").and_then(|d| d.parse().ok())
}

fn sampling_name(s: &str) -> &str {
    match s {
        "random" => "Random",
        "proximity" => "Distance",
        "full_view" => "Full view",
        other => other,
    }
}

fn method_name(m: &str, sampling: &str) -> String {
    match (m, sampling) {
        ("none", _) => "Supervised".into(),
        (m, "full_view") => format!("{m} (full view)"),
        (m, _) => m.into(),
    }
}

/// Patch-method curves for one dataset, one per (method, sampling).
pub fn plot_series(rows: &[AggregateRow], metric: Metric) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let Some(d) = divisor_value(&r.patch_size) else {
            continue;
        };
        let label = format!("{} / {}", r.method, sampling_name(&r.sampling));
        let v = metric.of(r);
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((d, v)),
            None => out.push(Series {
                label,
                points: vec![(d, v)],
            }),
        }
    }
    for s in &mut out {
        s.points.sort_by_key(|p| p.0);
    }
    out
}

fn baselines(rows: &[AggregateRow], metric: Metric) -> Vec<(String, f64)> {
    rows.iter()
        .filter(|r| r.patch_size == "full")
        .map(|r| (method_name(&r.method, &r.sampling), metric.of(r)))
        .collect()
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of a metric against the patch divisor. Baselines are drawn
/// as dashed horizontal lines.
pub fn render_svg(title: &str, metric: Metric, series: &[Series], base: &[(String, f64)]) -> String {
    let (w, h) = (640.0, 400.0);
    let (l, r, t, b) = (70.0, 190.0, 40.0, 50.0);
    let mut xs: Vec<usize> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_unstable();
    xs.dedup();
    let vals: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .chain(base.iter().map(|b| b.1))
        .collect();
    let (mut lo, mut hi) = vals
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, z), &v| (a.min(v), z.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.08 * (hi - lo);
    lo -= pad;
    hi += pad;
    let pw = w - l - r;
    let ph = h - t - b;
    let xpos = |d: usize| {
        let i = xs.iter().position(|&x| x == d).unwrap_or(0);
        if xs.len() <= 1 {
            l + pw / 2.0
        } else {
            l + pw * i as f64 / (xs.len() - 1) as f64
        }
    };
    let ypos = |v: f64| t + ph * (1.0 - (v - lo) / (hi - lo));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        l + pw / 2.0,
        esc(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{l}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{l}" y1="{t}" x2="{l}" y2="{}" stroke="black"/>"#,
        t + ph,
        l + pw,
        t + ph,
        t + ph
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = ypos(v);
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.1}" x2="{l}" y2="{y:.1}" stroke="black"/><line x1="{l}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="#ddd"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            l - 4.0,
            l + pw,
            l - 6.0,
            y + 4.0,
            if hi - lo < 5.0 {
                format!("{v:.3}")
            } else {
                format!("{v:.1}")
            }
        );
    }
    for &d in &xs {
        let x = xpos(d);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">L/{d}</text>"#,
            t + ph,
            t + ph + 4.0,
            t + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">Patch size</text>"#,
        l + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        t + ph / 2.0,
        t + ph / 2.0,
        metric.label()
    );
    let mut legend_y = t + 10.0;
    for (i, (name, v)) in base.iter().enumerate() {
        let c = COLORS[(series.len() + i) % COLORS.len()];
        let y = ypos(*v);
        let _ = writeln!(
            s,
            r#"<line x1="{l}" y1="{y:.1}" x2="{}" y2="{y:.1}" stroke="{c}" stroke-dasharray="6 4"/>"#,
            l + pw
        );
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{c}" stroke-dasharray="6 4"/><text x="{}" y="{}">{}</text>"#,
            l + pw + 12.0,
            l + pw + 32.0,
            l + pw + 38.0,
            legend_y + 4.0,
            esc(name)
        );
        legend_y += 18.0;
    }
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .map(|&(d, v)| format!("{:.1},{:.1}", xpos(d), ypos(v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" fill="none" stroke="{c}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for &(d, v) in &ser.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3.5" fill="{c}"/>"#,
                xpos(d),
                ypos(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            l + pw + 12.0,
            l + pw + 32.0,
            l + pw + 38.0,
            legend_y + 4.0,
            esc(&ser.label)
        );
        legend_y += 18.0;
    }
    s.push_str("</svg>\n");
    s
}

fn cell(r: &AggregateRow, metric: Metric, best: bool) -> String {
    let (v, sd) = match metric {
        Metric::Dice => (format!("{:.3}", r.dice), format!("{:.3}", r.dice_std)),
        Metric::Hd => (format!("{:.2}", r.hd), format!("{:.2}", r.hd_std)),
    };
    let text = if r.n > 1 { format!("{v} ± {sd}") } else { v };
    if best {
        format!("**{text}**")
    } else {
        text
    }
}

/// Markdown tables in the usual results layout: baselines
/// first, then patch methods by sampling strategy against patch size.
pub fn render_markdown(rows: &[AggregateRow]) -> String {
    let mut s = String::new();
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    for ds in datasets {
        let rows: Vec<&AggregateRow> = rows.iter().filter(|r| r.dataset == ds).collect();
        let best_dice = rows.iter().map(|r| r.dice).fold(f64::NEG_INFINITY, f64::max);
        let best_hd = rows.iter().map(|r| r.hd).fold(f64::INFINITY, f64::min);
        let is_best = |r: &AggregateRow, m: Metric| match m {
            Metric::Dice => r.dice == best_dice,
            Metric::Hd => r.hd == best_hd,
        };
        let _ = writeln!(s, "# {ds}\n");
        let base: Vec<&&AggregateRow> = rows.iter().filter(|r| r.patch_size == "full").collect();
        if !base.is_empty() {
            let _ = writeln!(s, "## Full-slice Baselines\n");
            let _ = writeln!(s, "| Method | HD | Dice | Seeds |\n|---|---|---|---|");
            for r in base {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    method_name(&r.method, &r.sampling),
                    cell(r, Metric::Hd, is_best(r, Metric::Hd)),
                    cell(r, Metric::Dice, is_best(r, Metric::Dice)),
                    r.n
                );
            }
            s.push('\n');
        }
        let patch: Vec<&&AggregateRow> = rows.iter().filter(|r| r.patch_size != "full").collect();
        if !patch.is_empty() {
            let mut sizes: Vec<&str> = patch.iter().map(|r| r.patch_size.as_str()).collect();
            sizes.sort_by_key(|p| divisor_value(p));
            sizes.dedup();
            let _ = writeln!(s, "## SSL Patch Methods\n");
            let mut head = String::from("| Method | Sampling |");
            let mut rule = String::from("|---|---|");
            for p in &sizes {
                let _ = write!(head, " {p} HD | {p} Dice |");
                rule.push_str("---|---|");
            }
            let _ = writeln!(s, "{head}\n{rule}");
            let mut keys: Vec<(&str, &str)> = patch.iter().map(|r| (r.method.as_str(), r.sampling.as_str())).collect();
            keys.dedup();
            for (m, smp) in keys {
                let _ = write!(s, "| {m} | {} |", sampling_name(smp));
                for p in &sizes {
                    match patch
                        .iter()
                        .find(|r| r.method == m && r.sampling == smp && r.patch_size == *p)
                    {
                        Some(r) => {
                            let _ = write!(
                                s,
                                " {} | {} |",
                                cell(r, Metric::Hd, is_best(r, Metric::Hd)),
                                cell(r, Metric::Dice, is_best(r, Metric::Dice))
                            );
                        }
                        None => s.push_str(" - | - |"),
                    }
                }
                s.push('\n');
            }
            s.push('\n');
        }
    }
    s.push_str(
        "Bold marks the best HD (lowest) and Dice (highest) per dataset. Values are mean ± sample std over seeds.\n",
    );
    s
}

pub fn write_results_csv(path: &Path, rows: &[AggregateRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_results_csv(path: &Path) -> Result<Vec<AggregateRow>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Writes `results.csv`, `runs.csv`, `report.md` and the two SVG plots.
pub fn emit_report(
    runs: &[RunRecord],
    out_dir: &Path,
    average_over_methods: bool,
) -> Result<ReportFiles, HarnessError> {
    let done: Vec<RunRecord> = runs.iter().filter(|r| r.status == RunStatus::Done).cloned().collect();
    if done.is_empty() {
        return Err(HarnessError::NothingToReport);
    }
    fs::create_dir_all(out_dir)?;
    let rows = aggregate(&done, average_over_methods);
    let results_csv = out_dir.join(RESULTS_CSV);
    write_results_csv(&results_csv, &rows)?;
    let runs_csv = out_dir.join(RUNS_CSV);
    let per_seed: Vec<EvalRow> = done.iter().flat_map(|r| r.eval_rows.iter().cloned()).collect();
    write_rows_csv(fs::File::create(&runs_csv)?, &per_seed)?;
    let markdown = out_dir.join(REPORT_MD);
    fs::write(&markdown, render_markdown(&rows))?;
    let mut plots = Vec::new();
    let mut datasets: Vec<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.dedup();
    for (metric, file) in [(Metric::Dice, DICE_SVG), (Metric::Hd, HD_SVG)] {
        for ds in &datasets {
            let subset: Vec<AggregateRow> = rows.iter().filter(|r| r.dataset == *ds).cloned().collect();
            let name = if datasets.len() == 1 {
                file.to_string()
            } else {
                format!("{ds}_{file}")
            };
            let path = out_dir.join(name);
            let svg = render_svg(
                &format!("{ds}: {} vs patch size", metric.label()),
                metric,
                &plot_series(&subset, metric),
                &baselines(&subset, metric),
            );
            fs::write(&path, svg)?;
            plots.push(path);
        }
    }
    Ok(ReportFiles {
        results_csv,
        runs_csv,
        markdown,
        plots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::Cell;
    use scalessl_core::{CropDivisor, Sampling, SslMethod};

    fn run(method: SslMethod, sampling: Sampling, d: Option<CropDivisor>, dice: f64, hd: f64) -> RunRecord {
        let cell = Cell {
            ssl_method: method,
            sampling,
            crop_divisor: d,
            seed: 0,
        };
        RunRecord {
            status: RunStatus::Done,
            eval_rows: vec![EvalRow {
                dataset: "thin_curves".into(),
                method: method.to_string(),
                sampling: sampling.to_string(),
                patch_divisor: cell.divisor_label(),
                hd,
                dice,
                seed: 0,
            }],
            ..RunRecord::pending(cell)
        }
    }

    fn grid() -> Vec<RunRecord> {
        let mut runs = vec![
            run(SslMethod::None, Sampling::FullView, None, 0.3, 20.0),
            run(SslMethod::Simclr, Sampling::FullView, None, 0.35, 18.0),
        ];
        for s in [Sampling::Random, Sampling::Proximity] {
            for (i, d) in CropDivisor::ALL.into_iter().enumerate() {
                runs.push(run(
                    SslMethod::Simclr,
                    s,
                    Some(d),
                    0.4 + 0.05 * i as f64,
                    15.0 - i as f64,
                ));
            }
        }
        runs
    }

    #[test]
    fn three_divisors_give_three_points_per_curve() {
        let rows = aggregate(&grid(), false);
        let series = plot_series(&rows, Metric::Dice);
        assert_eq!(series.len(), 2);
        assert!(series
            .iter()
            .all(|s| s.points.iter().map(|p| p.0).collect::<Vec<_>>() == vec![2, 4, 8]));
        let svg = render_svg("t", Metric::Dice, &series, &baselines(&rows, Metric::Dice));
        for line in svg.lines().filter(|l| l.contains("class=\"series\"")) {
            let pts = line.split("points=\"").nth(1).unwrap().trim_end_matches("\"/>");
            assert_eq!(pts.split(' ').count(), 3);
        }
    }

    #[test]
    fn markdown_groups_baselines_and_marks_best() {
        let md = render_markdown(&aggregate(&grid(), false));
        let base = md.find("## Full-slice Baselines").unwrap();
        let patch = md.find("## SSL Patch Methods").unwrap();
        assert!(base < patch);
        assert!(md[base..patch].contains("Supervised"));
        assert!(md[base..patch].contains("simclr (full view)"));
        assert!(md.contains("**0.500**"));
        assert!(md.contains("**13.00**"));
        assert!(md.contains("| simclr | Distance |"));
    }

    #[test]
    fn csv_round_trip_and_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&grid(), dir.path(), false).unwrap();
        let rows = aggregate(&grid(), false);
        assert_eq!(read_results_csv(&files.results_csv).unwrap(), rows);
        assert_eq!(files.plots.len(), 2);
        let mut failed = grid();
        failed.iter_mut().for_each(|r| r.status = RunStatus::Failed);
        assert!(matches!(
            emit_report(&failed, dir.path(), false),
            Err(HarnessError::NothingToReport)
        ));
    }
}

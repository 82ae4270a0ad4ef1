//! Aggregated tables, importance histograms and loss curves for an ablation directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::datrain::TrainLog;
use crate::error::Result;
use crate::evalharness::experiment::{IMPORTANCE_FILE, METRICS_FILE, RESULTS_CSV, RESULTS_JSON};
use crate::evalharness::{load_run_reports, ResultTable, Variant};
use crate::importance::{importance_diagnostics, ImportanceMatrix};

use super::{BUCKETS_CSV, COSINE_CSV, DIAGNOSTICS_JSON};

pub const LOSS_CURVES_CSV: &str = "loss_curves.csv";
pub const LOSS_CURVES_SVG: &str = "loss_curves.svg";

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Mean MLM loss per logged step for each variant, in table order.
type Curves = Vec<(Variant, Vec<(usize, f64)>)>;

fn mean_curves(logs: &[(Variant, TrainLog)]) -> Curves {
    let mut acc: BTreeMap<Variant, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for (v, log) in logs {
        for r in &log.rows {
            let e = acc.entry(*v).or_default().entry(r.step).or_insert((0.0, 0));
            e.0 += r.mlm_loss as f64;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(v, pts)| (v, pts.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()))
        .collect()
}

/// A line chart of `curves` as a standalone SVG document.
pub fn loss_curves_svg(curves: &Curves) -> String {
    let (w, h, m) = (720.0, 420.0, 60.0);
    let pts = curves.iter().flat_map(|(_, c)| c.iter());
    let max_step = pts.clone().map(|p| p.0).max().unwrap_or(1).max(1) as f64;
    let (mut lo, mut hi) = pts.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        hi = lo + 1.0;
    }
    let x = |s: f64| m + s / max_step * (w - 2.0 * m);
    let y = |v: f64| h - m - (v - lo) / (hi - lo) * (h - 2.0 * m);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(s, r#"<text x="15" y="{}" transform="rotate(-90 15 {})" text-anchor="middle">MLM loss (mean over seeds)</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{lo:.3}</text>"#, m - 5.0, h - m);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#, m - 5.0, m + 4.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{max_step}</text>"#, w - m, h - m + 16.0);
    for (i, (v, c)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let line: Vec<String> = c.iter().map(|&(st, val)| format!("{:.2},{:.2}", x(st as f64), y(val))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, line.join(" "));
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - m - 150.0, w - m - 130.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - m - 125.0, ly + 4.0, v.name());
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the report files for the ablation directory `dir` and returns their paths.
///
/// Output depends only on the run folders' contents, so repeated calls
/// produce identical bytes.
pub fn emit_report(dir: &Path) -> Result<Vec<PathBuf>> {
    let runs = load_run_reports(dir)?;
    let reports: Vec<_> = runs.iter().map(|(_, r)| r.clone()).collect();
    let table = ResultTable::from_reports(&reports);
    table.write(dir)?;
    let mut written = vec![dir.join(RESULTS_CSV), dir.join(RESULTS_JSON)];

    let mut per_seed: BTreeMap<u64, ImportanceMatrix> = BTreeMap::new();
    let mut logs = Vec::new();
    let mut curves_csv = String::from("variant,seed,step,mlm_loss,contrast_loss,total_loss\n");
    for (folder, r) in &runs {
        let imp = folder.join(IMPORTANCE_FILE);
        if imp.is_file() && !per_seed.contains_key(&r.seed) {
            per_seed.insert(r.seed, ImportanceMatrix::from_json(&fs::read_to_string(imp)?)?);
        }
        let log = TrainLog::from_csv(&fs::read_to_string(folder.join(METRICS_FILE))?)?;
        for row in &log.rows {
            let _ = writeln!(
                curves_csv,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.variant.name(),
                r.seed,
                row.step,
                row.mlm_loss,
                row.contrast_loss,
                row.total_loss
            );
        }
        logs.push((r.variant, log));
    }

    let mut seeds = per_seed.into_iter().map(|(s, m)| (format!("seed{s}"), m));
    match seeds.next() {
        Some((first_name, first)) => {
            let others: Vec<_> = seeds.collect();
            let diag = importance_diagnostics((&first_name, &first), &others)?;
            fs::write(dir.join(BUCKETS_CSV), diag.buckets_csv())?;
            fs::write(dir.join(COSINE_CSV), diag.cosine_csv())?;
            fs::write(dir.join(DIAGNOSTICS_JSON), diag.to_json())?;
            written.extend([dir.join(BUCKETS_CSV), dir.join(COSINE_CSV), dir.join(DIAGNOSTICS_JSON)]);
        }
        None => {
            fs::write(dir.join(BUCKETS_CSV), "domain,bucket_lo,bucket_hi,count\n")?;
            written.push(dir.join(BUCKETS_CSV));
        }
    }

    fs::write(dir.join(LOSS_CURVES_CSV), curves_csv)?;
    fs::write(dir.join(LOSS_CURVES_SVG), loss_curves_svg(&mean_curves(&logs)))?;
    written.extend([dir.join(LOSS_CURVES_CSV), dir.join(LOSS_CURVES_SVG)]);
    Ok(written)
}

//! Learning-curve SVGs from metric JSONL files.
//!
//! Every `*.jsonl` file under the input directory is one seed. Files are
//! grouped into series by the `config.json` next to them (algorithm and
//! sharing mode), or by file stem when there is none. Each numeric field
//! becomes one SVG with a mean line and a ±1 std band per series, plotted
//! against `env_steps`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use walkdir::WalkDir;

use super::ExperimentError;

/// Plotted even when no file provides it, so empty input still yields axes.
const ALWAYS: &str = "eval_mean";
const SKIP: [&str; 2] = ["iteration", "env_steps"];
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PlotSummary {
    pub files: Vec<PathBuf>,
    pub series: Vec<String>,
    pub skipped_lines: usize,
}

/// One point of a series: mean and population std over the seeds that
/// reported the metric at this step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BandPoint {
    pub x: f64,
    pub mean: f64,
    pub std: f64,
}

/// `label -> seed -> metric -> [(x, y)]`
type Runs = BTreeMap<String, Vec<BTreeMap<String, Vec<(f64, f64)>>>>;

fn series_label(file: &Path) -> String {
    let cfg = file.parent().map(|d| d.join("config.json"));
    if let Some(Ok(text)) = cfg.map(fs::read_to_string) {
        if let Ok(v) = serde_json::from_str::<Value>(&text) {
            if let (Some(a), Some(s)) = (v.get("algo").and_then(Value::as_str), v.get("sharing").and_then(Value::as_str)) {
                return format!("{a}/{s}");
            }
        }
    }
    file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_runs(input: &Path, skipped: &mut usize) -> Result<Runs, ExperimentError> {
    let mut runs = Runs::new();
    let mut files: Vec<PathBuf> = WalkDir::new(input)
        .into_iter()
        .filter_map(Result::ok)
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    files.sort();
    for file in files {
        let mut metrics: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for (k, line) in fs::read_to_string(&file)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(line) else {
                *skipped += 1;
                continue;
            };
            let x = obj.get("env_steps").and_then(Value::as_f64).unwrap_or(k as f64);
            for (name, v) in &obj {
                if let (false, Some(y)) = (SKIP.contains(&name.as_str()), v.as_f64()) {
                    metrics.entry(name.clone()).or_default().push((x, y));
                }
            }
        }
        runs.entry(series_label(&file)).or_default().push(metrics);
    }
    Ok(runs)
}

/// Aggregates seeds at every x any of them reported.
pub fn band(seeds: &[Vec<(f64, f64)>]) -> Vec<BandPoint> {
    let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for s in seeds {
        for &(x, y) in s {
            at.entry(x.to_bits()).or_default().push(y);
        }
    }
    let mut out: Vec<BandPoint> = at
        .into_iter()
        .map(|(bits, ys)| {
            let n = ys.len() as f64;
            let mean = ys.iter().sum::<f64>() / n;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            BandPoint {
                x: f64::from_bits(bits),
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    out.sort_by(|a, b| a.x.total_cmp(&b.x));
    out
}

fn render(metric: &str, series: &[(String, Vec<BandPoint>)]) -> String {
    let pts = series.iter().flat_map(|(_, b)| b.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in pts {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.mean - p.std);
        y1 = y1.max(p.mean + p.std);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{b} H{r}" fill="none" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{metric}</text>"#, W / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">env steps</text>"#, W / 2.0, H - 12.0);
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle" font-size="11">{v}</text>"#, H - PAD + 16.0);
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(s, r#"<text x="{}" y="{y:.1}" text-anchor="end" font-size="11">{v:.4}</text>"#, PAD - 4.0);
    }
    for (k, (label, pts)) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        if !pts.is_empty() {
            let upper: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean + p.std))).collect();
            let lower: Vec<String> = pts.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean - p.std))).collect();
            let _ = writeln!(s, r#"<polygon points="{} {}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#, upper.join(" "), lower.join(" "));
            let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.x), sy(p.mean))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, line.join(" "));
        }
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="12" fill="{c}">{label}</text>"#, W - PAD - 120.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<metric>.svg` for every numeric metric into `output`.
pub fn plot(input: &Path, output: &Path) -> Result<PlotSummary, ExperimentError> {
    let mut summary = PlotSummary::default();
    let runs = read_runs(input, &mut summary.skipped_lines)?;
    let mut metrics: Vec<String> = runs
        .values()
        .flat_map(|seeds| seeds.iter().flat_map(|m| m.keys().cloned()))
        .collect();
    metrics.push(ALWAYS.to_string());
    metrics.sort();
    metrics.dedup();
    fs::create_dir_all(output)?;
    summary.series = runs.keys().cloned().collect();
    for metric in metrics {
        let series: Vec<(String, Vec<BandPoint>)> = runs
            .iter()
            .map(|(label, seeds)| {
                let per: Vec<Vec<(f64, f64)>> = seeds.iter().filter_map(|m| m.get(&metric).cloned()).collect();
                (label.clone(), band(&per))
            })
            .collect();
        let path = output.join(format!("{metric}.svg"));
        fs::write(&path, render(&metric, &series))?;
        summary.files.push(path);
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_gives_empty_axes() {
        let (i, o) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let s = plot(i.path(), o.path()).unwrap();
        assert_eq!(s.files, vec![o.path().join("eval_mean.svg")]);
        let svg = fs::read_to_string(&s.files[0]).unwrap();
        assert!(svg.starts_with("<svg") && !svg.contains("polyline"));
    }

    #[test]
    fn constant_seeds_give_flat_band() {
        let seeds = vec![vec![(0.0, 1.0), (10.0, 1.0)], vec![(0.0, 1.0), (10.0, 1.0)]];
        let b = band(&seeds);
        assert_eq!(b.len(), 2);
        assert!(b.iter().all(|p| p.mean == 1.0 && p.std == 0.0));
    }

    #[test]
    fn malformed_lines_are_counted_and_series_are_labelled() {
        let (i, o) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        for (dir, algo) in [("a", "fp3o"), ("b", "mappo")] {
            let d = i.path().join(dir);
            fs::create_dir_all(&d).unwrap();
            fs::write(d.join("config.json"), format!(r#"{{"algo":"{algo}","sharing":"full"}}"#)).unwrap();
            fs::write(
                d.join("metrics.jsonl"),
                "{\"env_steps\":0,\"eval_mean\":1.0}\nnot json\n{\"env_steps\":5,\"eval_mean\":2.0,\"policy_loss\":null}\n",
            )
            .unwrap();
        }
        let s = plot(i.path(), o.path()).unwrap();
        assert_eq!(s.skipped_lines, 2);
        assert_eq!(s.series, vec!["fp3o/full".to_string(), "mappo/full".to_string()]);
        let svg = fs::read_to_string(o.path().join("eval_mean.svg")).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("fp3o/full") && svg.contains("mappo/full"));
    }
}

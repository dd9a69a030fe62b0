use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

use super::record::{read_rows, MetricsRow};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Multi-series line chart; non-finite points are skipped.
pub fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 400.0, 60.0, 150.0, 30.0, 40.0);
    let pts = || {
        series
            .iter()
            .flat_map(|(_, p)| p.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
    };
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
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
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{ml}" y="18" font-size="13">{title}</text>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="gray"/>"#
    );
    for k in 0..=4 {
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">{fy:.3}</text>"#, sy(fy) + 4.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}">{fx:.0}</text>"#,
            sx(fx) - 8.0,
            h - mb + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{}">{x_label}</text>"#,
        ml + pw / 2.0 - 20.0,
        h - 6.0
    );
    let _ = writeln!(s, r#"<text x="4" y="{}">{y_label}</text>"#, mt - 6.0);
    for (k, (name, points)) in series.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
        }
        let ly = mt + 14.0 * k as f64 + 10.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            w - mr + 10.0,
            w - mr + 30.0,
            w - mr + 35.0,
            ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn column(name: &str) -> Option<fn(&MetricsRow) -> f64> {
    Some(match name {
        "true_reward" => |r| r.true_reward,
        "disc_reward" => |r| r.disc_reward,
        "episode_return" => |r| r.episode_return,
        "order_parameter" => |r| r.order_parameter,
        "disc_loss" => |r| r.disc_loss,
        "policy_loss" => |r| r.policy_loss,
        "value_loss" => |r| r.value_loss,
        "entropy" => |r| r.entropy,
        "approx_kl" => |r| r.approx_kl,
        _ => return None,
    })
}

/// Plots `metric` against update for every `seed_*/metrics.csv` of each run
/// directory: one line per run, averaged over its seeds. Returns the SVG path
/// written to `out`.
pub fn plot_metrics(run_dirs: &[PathBuf], metric: &str, out: &Path) -> Result<PathBuf> {
    let get = column(metric).ok_or_else(|| Error::Config(format!("unknown metric `{metric}`")))?;
    let mut series = Vec::new();
    for dir in run_dirs {
        let mut by_update: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .is_some_and(|n| n.to_string_lossy().starts_with("seed_"))
            })
            .map(|p| p.join("metrics.csv"))
            .filter(|p| p.exists())
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::Input(format!(
                "no seed_*/metrics.csv under {}",
                dir.display()
            )));
        }
        for path in entries {
            for r in read_rows::<MetricsRow>(&path)? {
                let v = get(&r);
                if v.is_finite() {
                    by_update.entry(r.update).or_default().push(v);
                }
            }
        }
        let label = super::RunSummary::load(&dir.join("summary.toml"))
            .map(|s| s.label)
            .unwrap_or_else(|_| dir.display().to_string());
        let pts = by_update
            .into_iter()
            .map(|(u, v)| (u as f64, v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        series.push((label, pts));
    }
    let svg = line_plot_svg(metric, "update", metric, &series);
    let path = if out.extension().is_some() {
        out.to_path_buf()
    } else {
        out.join(format!("{metric}.svg"))
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&path, svg)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plot_skips_nan_and_lists_series() {
        let svg = line_plot_svg(
            "t",
            "x",
            "y",
            &[
                ("a".into(), vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)]),
                ("b".into(), vec![]),
            ],
        );
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains(">a</text>") && svg.contains(">b</text>"));
        assert!(!svg.contains("NaN"));
    }

    #[test]
    fn unknown_metric_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = plot_metrics(&[dir.path().to_path_buf()], "nope", dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

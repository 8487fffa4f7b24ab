//! CSV, resolved-config and SVG outputs of a run.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::error::{HarnessError, Result};
use crate::experiment::{summarize, ExperimentReport};

pub const TIMESERIES_HEADER: &str =
    "t,controller,mean_state,std_state,expected_safe_prob,empirical_safe_prob,fallback_count";
pub const SUMMARY_HEADER: &str =
    "controller,time_avg_expected_safe_prob,stderr,min_expected_safe_prob,terminal_empirical_safe_prob,fallback_total,fallback_rate,out_of_domain_queries,config_hash";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| HarnessError::Io { context: format!("writing {}", path.display()), source })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per (controller, time step); header only for no reports.
pub fn timeseries_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(TIMESERIES_HEADER);
    out.push('\n');
    for r in reports {
        let label = csv_field(&r.metadata.label);
        for k in 0..r.n_steps() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.times[k],
                label,
                r.mean_state[k],
                r.std_state[k],
                r.expected_safe_prob[k],
                r.empirical_safe_prob[k],
                r.fallback_count[k]
            );
        }
    }
    out
}

pub fn summary_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        let s = summarize(r);
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&s.label),
            s.time_avg_expected,
            s.time_avg_expected_stderr,
            s.min_expected,
            s.terminal_empirical,
            s.fallback_total,
            r.fallback_rate(),
            r.metadata.out_of_domain_queries,
            r.metadata.config_hash
        );
    }
    out
}

fn file_stem(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes every output into `dir` (created if missing) and returns the paths.
pub fn write_outputs(dir: &Path, reports: &[ExperimentReport], configs: &[ExperimentConfig]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)
        .map_err(|source| HarnessError::Io { context: format!("creating {}", dir.display()), source })?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        write(&path, &text)?;
        written.push(path);
        Ok(())
    };
    put("timeseries.csv".into(), timeseries_csv(reports))?;
    put("summary.csv".into(), summary_csv(reports))?;
    if configs.len() == 1 {
        put("config.resolved.toml".into(), configs[0].to_toml())?;
    } else {
        let mut used = HashSet::new();
        for (i, cfg) in configs.iter().enumerate() {
            let mut stem = file_stem(&cfg.label());
            if !used.insert(stem.clone()) {
                stem = format!("{stem}_{i}");
            }
            put(format!("config.resolved.{stem}.toml"), cfg.to_toml())?;
        }
    }
    if !reports.is_empty() {
        let band = |r: &ExperimentReport| Series {
            label: r.metadata.label.clone(),
            x: r.times.clone(),
            y: r.mean_state.clone(),
            band: Some(r.std_state.clone()),
        };
        put("mean_state.svg".into(), line_plot("Mean state", "x", &reports.iter().map(band).collect::<Vec<_>>()))?;
        let expected = |r: &ExperimentReport| Series {
            label: r.metadata.label.clone(),
            x: r.times.clone(),
            y: r.expected_safe_prob.clone(),
            band: Some(r.std_safe_prob.clone()),
        };
        put(
            "expected_safe_prob.svg".into(),
            line_plot("Expected safe probability", "E[F]", &reports.iter().map(expected).collect::<Vec<_>>()),
        )?;
        let empirical = |r: &ExperimentReport| Series {
            label: r.metadata.label.clone(),
            x: r.times.clone(),
            y: r.empirical_safe_prob.clone(),
            band: None,
        };
        put(
            "empirical_safe_prob.svg".into(),
            line_plot("Empirical safe probability", "P(safe)", &reports.iter().map(empirical).collect::<Vec<_>>()),
        )?;
    }
    Ok(written)
}

pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Half-width of a shaded band around `y`.
    pub band: Option<Vec<f64>>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

/// Minimal SVG line chart with optional ±band per series.
pub fn line_plot(title: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h) = (760.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let mut x_lo = f64::INFINITY;
    let mut x_hi = f64::NEG_INFINITY;
    let mut y_lo = f64::INFINITY;
    let mut y_hi = f64::NEG_INFINITY;
    for s in series {
        for (i, (&x, &y)) in s.x.iter().zip(&s.y).enumerate() {
            let b = s.band.as_ref().map_or(0.0, |b| b[i]);
            if x.is_finite() && y.is_finite() {
                x_lo = x_lo.min(x);
                x_hi = x_hi.max(x);
                y_lo = y_lo.min(y - b);
                y_hi = y_hi.max(y + b);
            }
        }
    }
    if !x_lo.is_finite() {
        (x_lo, x_hi, y_lo, y_hi) = (0.0, 1.0, 0.0, 1.0);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    if y_hi - y_lo < 1e-9 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let pad = 0.05 * (y_hi - y_lo);
    let (y_lo, y_hi) = (y_lo - pad, y_hi + pad);
    let px = |x: f64| left + (x - x_lo) / (x_hi - x_lo) * pw;
    let py = |y: f64| top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        left + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(svg, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for t in nice_ticks(x_lo, x_hi, 5) {
        let x = px(t);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#333"/>"##,
            top + ph,
            top + ph + 5.0
        );
        let _ =
            writeln!(svg, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 18.0, fmt_tick(t));
    }
    for t in nice_ticks(y_lo, y_hi, 5) {
        let y = py(t);
        let _ = writeln!(svg, r##"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="#333"/>"##, left - 5.0);
        let _ =
            writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, left - 8.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">t</text>"#, left + pw / 2.0, h - 12.0);
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if let Some(b) = &s.band {
            let mut pts: Vec<String> =
                s.x.iter().zip(&s.y).zip(b).map(|((&x, &y), &d)| format!("{:.2},{:.2}", px(x), py(y + d))).collect();
            pts.extend(
                s.x.iter().zip(&s.y).zip(b).rev().map(|((&x, &y), &d)| format!("{:.2},{:.2}", px(x), py(y - d))),
            );
            let _ = writeln!(
                svg,
                r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
                pts.join(" ")
            );
        }
        let pts: Vec<String> = s.x.iter().zip(&s.y).map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ =
            writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#, pts.join(" "));
        let ly = top + 12.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
            lx + 20.0
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    svg
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

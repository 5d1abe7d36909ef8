//! Run-directory artifacts: CSV logs with config-hash headers, simple SVG
//! line plots, and the timestamp sidecar. Every writer is byte-deterministic
//! for identical inputs; wall-clock time only ever lands in `meta.json`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::LastlabError;
use crate::grpo::IterStats;
use crate::sft::SftLogRow;

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// CSV with `# key=value` comment headers; the config hash goes first.
pub fn write_csv(
    path: &Path,
    config_hash: &str,
    extra_header: &[(&str, &str)],
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<(), LastlabError> {
    let mut out = String::new();
    writeln!(out, "# config_hash={config_hash}").unwrap();
    for (k, v) in extra_header {
        writeln!(out, "# {k}={v}").unwrap();
    }
    writeln!(out, "{}", columns.join(",")).unwrap();
    for row in rows {
        writeln!(out, "{}", row.join(",")).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_training_log(
    path: &Path,
    config_hash: &str,
    rows: &[SftLogRow],
) -> Result<(), LastlabError> {
    let data: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.phase.to_string(),
                fmt_f64(r.ce),
                fmt_f64(r.l_wm),
                fmt_f64(r.l_3d),
                fmt_f64(r.total),
                fmt_f64(r.grad_norm),
            ]
        })
        .collect();
    write_csv(
        path,
        config_hash,
        &[],
        &["step", "phase", "ce", "l_wm", "l_3d", "total", "grad_norm"],
        &data,
    )
}

pub fn write_rl_log(path: &Path, config_hash: &str, rows: &[IterStats]) -> Result<(), LastlabError> {
    let data: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.iter.to_string(),
                fmt_f64(r.mean_reward),
                fmt_f64(r.reward_std),
                fmt_f64(r.r_traj_mean),
                fmt_f64(r.r_fmt_mean),
                fmt_f64(r.r_goal_mean),
                fmt_f64(r.kl),
                fmt_f64(r.clip_frac),
                fmt_f64(r.fallback_rate),
                (r.skipped as u8).to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        config_hash,
        &[],
        &[
            "iter",
            "mean_reward",
            "reward_std",
            "r_traj_mean",
            "r_fmt_mean",
            "r_goal_mean",
            "kl",
            "clip_frac",
            "fallback_rate",
            "skipped",
        ],
        &data,
    )
}

/// Minimal SVG polyline chart; series share the x axis (index).
pub fn plot_svg(
    path: &Path,
    title: &str,
    series: &[(&str, Vec<f64>)],
) -> Result<(), LastlabError> {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const MARGIN: f64 = 45.0;
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let n = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, v) in series {
        for &x in v {
            if x.is_finite() {
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    if !lo.is_finite() || n < 2 {
        lo = 0.0;
        hi = 1.0;
    }
    if (hi - lo).abs() < 1e-12 {
        hi = lo + 1.0;
    }
    let sx = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (n.max(2) - 1) as f64;
    let sy = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        out,
        r#"<text x="{}" y="20" font-family="monospace" font-size="14">{title}</text>"#,
        MARGIN
    )
    .unwrap();
    writeln!(
        out,
        r##"<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="#444"/>"##,
        H - MARGIN,
        W - MARGIN,
        H - MARGIN
    )
    .unwrap();
    writeln!(
        out,
        r##"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="#444"/>"##,
        H - MARGIN
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="4" y="{}" font-family="monospace" font-size="11">{}</text>"#,
        H - MARGIN,
        fmt_f64(lo)
    )
    .unwrap();
    writeln!(
        out,
        r#"<text x="4" y="{}" font-family="monospace" font-size="11">{}</text>"#,
        MARGIN + 4.0,
        fmt_f64(hi)
    )
    .unwrap();
    for (si, (name, values)) in series.iter().enumerate() {
        if values.len() < 2 {
            continue;
        }
        let color = palette[si % palette.len()];
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(i, &v)| format!("{:.2},{:.2}", sx(i), sy(v.clamp(lo, hi))))
            .collect();
        writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="12" fill="{color}">{name}</text>"#,
            W - MARGIN - 120.0,
            MARGIN + 16.0 * si as f64
        )
        .unwrap();
    }
    writeln!(out, "</svg>").unwrap();
    std::fs::write(path, out)?;
    Ok(())
}

/// Timestamps live here and only here, away from the hashed artifacts.
pub fn write_meta(dir: &Path, command: &str, config_hash: &str) -> Result<(), LastlabError> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let body = format!(
        "{{\"command\":\"{command}\",\"config_hash\":\"{config_hash}\",\"unix_time\":{now}}}\n"
    );
    std::fs::write(dir.join("meta.json"), body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_svg_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![vec!["1".to_string(), "0.5".to_string()]];
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        write_csv(&p1, "beef", &[("note", "x")], &["step", "v"], &rows).unwrap();
        write_csv(&p2, "beef", &[("note", "x")], &["step", "v"], &rows).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let s1 = dir.path().join("a.svg");
        let s2 = dir.path().join("b.svg");
        let series = vec![("loss", vec![1.0, 0.5, 0.25, 0.2])];
        plot_svg(&s1, "loss", &series).unwrap();
        plot_svg(&s2, "loss", &series).unwrap();
        assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
    }
}

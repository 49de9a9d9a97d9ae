use std::fmt::Write;

use super::report::SweepReport;
use crate::error::{Error, Result};

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

const GROUP_W: f64 = 56.0;
const LEFT: f64 = 60.0;
const TOP: f64 = 40.0;
const PLOT_H: f64 = 260.0;
const DOT_R: f64 = 4.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart of `key`/`metric` (a value in [0, 1]): one group per
/// availability pattern, one bar per labelled report. Below each group a
/// column of dots marks available (filled) and unavailable (open) modalities.
pub fn render_svg(reports: &[(String, SweepReport)], key: &str, metric: &str, modalities: &[String]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::invalid("render_svg", "no reports"))?;
    let patterns = first.1.patterns();
    if patterns.is_empty() {
        return Err(Error::invalid("render_svg", format!("report {} is empty", first.0)));
    }
    let m = patterns[0].len();
    let bar_w = (GROUP_W - 12.0) / reports.len() as f64;
    let plot_w = GROUP_W * patterns.len() as f64;
    let dots_h = 14.0 * m as f64 + 10.0;
    let legend_h = 18.0 * reports.len() as f64;
    let width = LEFT + plot_w + 20.0;
    let height = TOP + PLOT_H + dots_h + legend_h + 20.0;
    let base = TOP + PLOT_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{} {}</text>"#,
        LEFT + plot_w / 2.0,
        escape(key),
        escape(metric)
    );
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let y = base - v * PLOT_H;
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            LEFT + plot_w
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for (gi, pattern) in patterns.iter().enumerate() {
        let gx = LEFT + gi as f64 * GROUP_W + 6.0;
        let _ = writeln!(s, r#"<g class="group" data-pattern="{pattern}">"#);
        for (ri, (label, report)) in reports.iter().enumerate() {
            let Some(v) = report.value(pattern, key, metric) else {
                continue;
            };
            let h = v.clamp(0.0, 1.0) * PLOT_H;
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"><title>{} {pattern}: {v:.4}</title></rect>"#,
                gx + ri as f64 * bar_w,
                base - h,
                bar_w,
                PALETTE[ri % PALETTE.len()],
                escape(label)
            );
        }
        for (mi, c) in pattern.chars().enumerate() {
            let fill = if c == '1' { "black" } else { "white" };
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="{DOT_R}" fill="{fill}" stroke="black"/>"#,
                gx + (GROUP_W - 12.0) / 2.0,
                base + 14.0 + 14.0 * mi as f64
            );
        }
        s.push_str("</g>\n");
    }
    for (mi, name) in modalities.iter().enumerate().take(m) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            base + 18.0 + 14.0 * mi as f64,
            escape(name)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{LEFT:.1}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#,
        LEFT + plot_w
    );
    for (ri, (label, _)) in reports.iter().enumerate() {
        let y = base + dots_h + 10.0 + 18.0 * ri as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[ri % PALETTE.len()],
            LEFT + 18.0,
            y,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

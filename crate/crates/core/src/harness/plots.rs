use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::experiment::TransferReport;
use crate::error::Result;

const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Models drawn as bars: the targets, or the source alone for a white-box
/// only report.
fn bar_models(report: &TransferReport) -> Vec<&str> {
    let targets: Vec<&str> = report.targets().collect();
    if targets.is_empty() {
        vec![report.source.as_str()]
    } else {
        targets
    }
}

/// Grouped bars of median adversarial mIoU: one group per attack in report
/// order, one bar per target. Each bar carries its value in `data-value`.
pub fn bar_chart_svg(report: &TransferReport) -> String {
    let models = bar_models(report);
    let (bar_w, gap, left, top, plot_h) = (18.0, 22.0, 56.0, 30.0, 220.0);
    let group_w = bar_w * models.len() as f64 + gap;
    let width = left + group_w * report.attacks.len() as f64 + 150.0;
    let height = top + plot_h + 90.0;
    let base = top + plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="18" font-size="13">Median adversarial mIoU by attack (source {})</text>"#,
        escape(&report.source)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = base - v * plot_h;
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.2}</text>"##,
            width - 150.0,
            left - 4.0,
            y + 4.0
        );
    }
    for (gi, attack) in report.attacks.iter().enumerate() {
        let gx = left + gap / 2.0 + gi as f64 * group_w;
        let _ = writeln!(s, r#"<g class="group" data-attack="{}">"#, escape(attack));
        for (mi, model) in models.iter().enumerate() {
            let Some(value) = report.median(attack, model) else {
                continue;
            };
            let h = value.clamp(0.0, 1.0) * plot_h;
            let _ = writeln!(
                s,
                r#"<rect class="bar" x="{}" y="{}" width="{bar_w}" height="{h}" fill="{}" data-target="{}" data-value="{value}"/>"#,
                gx + mi as f64 * bar_w,
                base - h,
                PALETTE[mi % PALETTE.len()],
                escape(model)
            );
        }
        let cx = gx + bar_w * models.len() as f64 / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="end" transform="rotate(-35 {cx} {})">{}</text>"#,
            base + 14.0,
            base + 14.0,
            escape(attack)
        );
        let _ = writeln!(s, "</g>");
    }
    let lx = width - 140.0;
    for (mi, model) in models.iter().enumerate() {
        let y = top + 16.0 * mi as f64;
        let clean = report.clean_miou(model).unwrap_or(f64::NAN);
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{y}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{} (clean {clean:.3})</text>"#,
            PALETTE[mi % PALETTE.len()],
            lx + 14.0,
            y + 9.0,
            escape(model)
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        width - 150.0
    );
    s.push_str("</svg>\n");
    s
}

/// Mean source loss and mean stage flag per iteration, one polyline per
/// attack, stacked in two panels.
pub fn trace_svg(report: &TransferReport) -> Option<String> {
    if report.traces.is_empty() {
        return None;
    }
    let (left, top, plot_w, plot_h, sep) = (56.0, 30.0, 420.0, 160.0, 50.0);
    let width = left + plot_w + 160.0;
    let height = top + 2.0 * plot_h + sep + 40.0;
    let max_loss = report
        .traces
        .iter()
        .flat_map(|t| t.points.iter().map(|p| p.loss))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let max_iter = report
        .traces
        .iter()
        .map(|t| t.points.len())
        .max()
        .unwrap_or(1)
        .saturating_sub(1)
        .max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let panels = [
        ("mean source loss", top, max_loss),
        ("mean stage flag", top + plot_h + sep, 2.0),
    ];
    for (title, y0, _) in panels {
        let _ = writeln!(
            s,
            r#"<text x="{left}" y="{}" font-size="12">{title}</text><rect x="{left}" y="{y0}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#,
            y0 - 6.0
        );
    }
    for (ti, trace) in report.traces.iter().enumerate() {
        let color = PALETTE[ti % PALETTE.len()];
        for (pi, (_, y0, ymax)) in panels.iter().enumerate() {
            let pts: Vec<String> = trace
                .points
                .iter()
                .map(|p| {
                    let v = if pi == 0 { p.loss } else { p.stage };
                    let x = left + p.iteration as f64 / max_iter * plot_w;
                    let y = y0 + plot_h - (v / ymax).clamp(0.0, 1.0) * plot_h;
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" data-attack="{}" points="{}"/>"#,
                escape(&trace.attack),
                pts.join(" ")
            );
        }
        let y = top + 14.0 * ti as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            left + plot_w + 10.0,
            left + plot_w + 24.0,
            left + plot_w + 28.0,
            y + 4.0,
            escape(&trace.attack)
        );
    }
    s.push_str("</svg>\n");
    Some(s)
}

/// Writes `<prefix>_bars.svg` and, when traces are present,
/// `<prefix>_traces.svg` into `out_dir`. An empty report writes nothing.
pub fn emit_plots(report: &TransferReport, out_dir: impl AsRef<Path>, prefix: &str) -> Result<Vec<PathBuf>> {
    if report.is_empty() {
        log::warn!("report has no records; no plots written");
        return Ok(Vec::new());
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let bars = dir.join(format!("{prefix}_bars.svg"));
    fs::write(&bars, bar_chart_svg(report))?;
    written.push(bars);
    if let Some(svg) = trace_svg(report) {
        let path = dir.join(format!("{prefix}_traces.svg"));
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

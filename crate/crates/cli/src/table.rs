//! Transfer matrix rendering: models as columns, a clean row on top and one
//! row of median adversarial mIoU per attack.

use segattack::harness::TransferReport;

pub fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "failed".into(),
    }
}

fn rows(report: &TransferReport) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["attack".to_string()];
    for m in &report.models {
        header.push(if *m == report.source {
            format!("{m} (source)")
        } else {
            m.clone()
        });
    }
    let mut body = Vec::new();
    let mut clean = vec!["clean".to_string()];
    clean.extend(report.models.iter().map(|m| fmt_value(report.clean_miou(m))));
    body.push(clean);
    for a in &report.attacks {
        let mut row = vec![a.clone()];
        row.extend(report.models.iter().map(|m| fmt_value(report.median(a, m))));
        body.push(row);
    }
    (header, body)
}

pub fn render_plain(report: &TransferReport) -> String {
    let (header, body) = rows(report);
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|r| r[c].len())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |r: &[String]| {
        r.iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, w))| {
                if i == 0 {
                    format!("{cell:<w$}")
                } else {
                    format!("{cell:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

pub fn render_markdown(report: &TransferReport) -> String {
    let (header, body) = rows(report);
    let mut out = format!("| {} |\n", header.join(" | "));
    out.push_str(&format!("|{}\n", ":---|".repeat(1) + &"---:|".repeat(header.len() - 1)));
    for r in &body {
        out.push_str(&format!("| {} |\n", r.join(" | ")));
    }
    out
}

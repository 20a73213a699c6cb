//! Line-oriented text serialization of [`TransferReport`] and its CSV export.
//!
//! Every line is a record kind followed by `key=value` fields. String values
//! are double-quoted with `\"`, `\\` and `\n` escapes; numbers are bare and
//! use the shortest representation that parses back to the same value.
//!
//! ```text
//! segattack-report version=1
//! meta dataset="..." source="A" started=1700000000 finished=1700000100
//! model name="A"
//! attack name="pgd" hash="0123456789abcdef"
//! seed attack="pgd" target="B" seed=3 clean=0.91 adv=0.42 status="ok"
//! cell attack="pgd" seed=3 max_linf=0.031 min=0 max=1 status="ok"
//! trace attack="pgd" t=0 loss=0.3 stage=0 misclassified=0.1 kl=0
//! ```

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::experiment::{AttackTrace, CellStats, SeedOutcome, TracePoint, TransferRecord, TransferReport};
use crate::error::{Error, Result};

const HEADER: &str = "segattack-report";
const VERSION: u32 = 1;

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn status_text(s: &std::result::Result<(), String>) -> String {
    match s {
        Ok(()) => "ok".into(),
        Err(e) => format!("error: {e}"),
    }
}

fn parse_status(s: &str) -> std::result::Result<std::result::Result<(), String>, String> {
    if s == "ok" {
        Ok(Ok(()))
    } else if let Some(e) = s.strip_prefix("error: ") {
        Ok(Err(e.to_string()))
    } else {
        Err(format!("status must be \"ok\" or \"error: ...\", got {s:?}"))
    }
}

pub fn format_report(report: &TransferReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER} version={VERSION}");
    let _ = writeln!(
        out,
        "meta dataset={} source={} started={} finished={}",
        quote(&report.dataset_id),
        quote(&report.source),
        report.started,
        report.finished
    );
    for m in &report.models {
        let _ = writeln!(out, "model name={}", quote(m));
    }
    for a in &report.attacks {
        let hash = report
            .records
            .iter()
            .find(|r| &r.attack == a)
            .map(|r| r.config_hash.as_str())
            .unwrap_or("");
        let _ = writeln!(out, "attack name={} hash={}", quote(a), quote(hash));
    }
    for r in &report.records {
        for o in &r.outcomes {
            let (adv, status) = match &o.adv_miou {
                Ok(v) => (*v, Ok(())),
                Err(e) => (f64::NAN, Err(e.clone())),
            };
            let _ = writeln!(
                out,
                "seed attack={} target={} seed={} clean={} adv={} status={}",
                quote(&r.attack),
                quote(&r.target),
                o.seed,
                r.clean_miou,
                adv,
                quote(&status_text(&status))
            );
        }
    }
    for c in &report.cells {
        let _ = writeln!(
            out,
            "cell attack={} seed={} max_linf={} min={} max={} status={}",
            quote(&c.attack),
            c.seed,
            c.max_linf,
            c.min_value,
            c.max_value,
            quote(&status_text(&c.status))
        );
    }
    for t in &report.traces {
        for p in &t.points {
            let _ = writeln!(
                out,
                "trace attack={} t={} loss={} stage={} misclassified={} kl={}",
                quote(&t.attack),
                p.iteration,
                p.loss,
                p.stage,
                p.misclassified,
                p.mean_kl
            );
        }
    }
    out
}

pub fn write_report(path: impl AsRef<Path>, report: &TransferReport) -> Result<()> {
    fs::write(path, format_report(report))?;
    Ok(())
}

struct Fields<'a> {
    line: usize,
    kind: &'a str,
    map: HashMap<String, String>,
}

impl Fields<'_> {
    fn err(&self, detail: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            detail: format!("{} record: {}", self.kind, detail.into()),
        }
    }

    fn str(&self, key: &str) -> Result<String> {
        self.map
            .get(key)
            .cloned()
            .ok_or_else(|| self.err(format!("missing field {key}")))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|_| self.err(format!("field {key} has unparsable value {raw:?}")))
    }
}

fn tokenize(line_no: usize, line: &str) -> Result<Fields<'_>> {
    let err = |d: String| Error::Parse {
        line: line_no,
        detail: d,
    };
    let line = line.trim_end();
    let (kind, mut rest) = line.split_once(' ').unwrap_or((line, ""));
    let mut map = HashMap::new();
    loop {
        rest = rest.trim_start();
        if rest.is_empty() {
            break;
        }
        let eq = rest
            .find('=')
            .ok_or_else(|| err(format!("expected key=value near {rest:?}")))?;
        let key = rest[..eq].to_string();
        if key.is_empty() || key.contains(' ') {
            return Err(err(format!("bad key near {rest:?}")));
        }
        rest = &rest[eq + 1..];
        let value = if let Some(body) = rest.strip_prefix('"') {
            let mut value = String::new();
            let mut chars = body.char_indices();
            let mut end = None;
            while let Some((i, c)) = chars.next() {
                match c {
                    '"' => {
                        end = Some(i + 1);
                        break;
                    }
                    '\\' => match chars.next() {
                        Some((_, '"')) => value.push('"'),
                        Some((_, '\\')) => value.push('\\'),
                        Some((_, 'n')) => value.push('\n'),
                        other => return Err(err(format!("bad escape {other:?} in {key}"))),
                    },
                    c => value.push(c),
                }
            }
            let end = end.ok_or_else(|| err(format!("unterminated string in {key}")))?;
            rest = &body[end..];
            value
        } else {
            let end = rest.find(' ').unwrap_or(rest.len());
            let v = rest[..end].to_string();
            rest = &rest[end..];
            v
        };
        if map.insert(key.clone(), value).is_some() {
            return Err(err(format!("duplicate field {key}")));
        }
    }
    Ok(Fields {
        line: line_no,
        kind,
        map,
    })
}

pub fn parse_report(text: &str) -> Result<TransferReport> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or(Error::Empty("report file is empty"))?;
    let head = tokenize(1, first)?;
    if head.kind != HEADER {
        return Err(head.err(format!("expected {HEADER} header")));
    }
    let version: u32 = head.num("version")?;
    if version != VERSION {
        return Err(head.err(format!("unsupported version {version}, expected {VERSION}")));
    }

    let mut report = TransferReport {
        dataset_id: String::new(),
        source: String::new(),
        models: Vec::new(),
        attacks: Vec::new(),
        records: Vec::new(),
        cells: Vec::new(),
        traces: Vec::new(),
        started: 0,
        finished: 0,
    };
    let mut hashes: HashMap<String, String> = HashMap::new();
    let mut saw_meta = false;
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f = tokenize(no, line)?;
        match f.kind {
            "meta" => {
                report.dataset_id = f.str("dataset")?;
                report.source = f.str("source")?;
                report.started = f.num("started")?;
                report.finished = f.num("finished")?;
                saw_meta = true;
            }
            "model" => report.models.push(f.str("name")?),
            "attack" => {
                let name = f.str("name")?;
                hashes.insert(name.clone(), f.str("hash")?);
                report.attacks.push(name);
            }
            "seed" => {
                let attack = f.str("attack")?;
                let target = f.str("target")?;
                let clean: f64 = f.num("clean")?;
                let adv: f64 = f.num("adv")?;
                let status = parse_status(&f.str("status")?).map_err(|e| f.err(e))?;
                let config_hash = hashes
                    .get(&attack)
                    .cloned()
                    .ok_or_else(|| f.err(format!("attack {attack:?} not declared")))?;
                let outcome = SeedOutcome {
                    seed: f.num("seed")?,
                    adv_miou: status.map(|()| adv),
                };
                match report
                    .records
                    .iter_mut()
                    .find(|r| r.attack == attack && r.target == target)
                {
                    Some(r) => {
                        if r.clean_miou.to_bits() != clean.to_bits() {
                            return Err(f.err(format!("clean mIoU for {target} differs between seeds")));
                        }
                        r.outcomes.push(outcome);
                    }
                    None => report.records.push(TransferRecord {
                        source: report.source.clone(),
                        attack,
                        config_hash,
                        target,
                        clean_miou: clean,
                        outcomes: vec![outcome],
                    }),
                }
            }
            "cell" => report.cells.push(CellStats {
                attack: f.str("attack")?,
                seed: f.num("seed")?,
                status: parse_status(&f.str("status")?).map_err(|e| f.err(e))?,
                max_linf: f.num("max_linf")?,
                min_value: f.num("min")?,
                max_value: f.num("max")?,
            }),
            "trace" => {
                let attack = f.str("attack")?;
                let point = TracePoint {
                    iteration: f.num("t")?,
                    loss: f.num("loss")?,
                    stage: f.num("stage")?,
                    misclassified: f.num("misclassified")?,
                    mean_kl: f.num("kl")?,
                };
                match report.traces.iter_mut().find(|t| t.attack == attack) {
                    Some(t) => t.points.push(point),
                    None => report.traces.push(AttackTrace {
                        attack,
                        points: vec![point],
                    }),
                }
            }
            other => return Err(f.err(format!("unknown record kind {other:?}"))),
        }
    }
    if !saw_meta {
        return Err(Error::Parse {
            line: 1,
            detail: "report has no meta record".into(),
        });
    }
    Ok(report)
}

pub fn read_report(path: impl AsRef<Path>) -> Result<TransferReport> {
    parse_report(&fs::read_to_string(path)?)
}

pub const CSV_HEADER: &str = "source,attack,target,seed,clean_miou,adv_miou,status";

/// One row per (source, attack, target, seed). Failed cells have an empty
/// `adv_miou` and the error in `status`.
pub fn format_csv(report: &TransferReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    // in-memory writes of fixed-width rows cannot fail
    w.write_record(CSV_HEADER.split(',')).expect("csv header");
    for r in &report.records {
        for o in &r.outcomes {
            let (adv, status) = match &o.adv_miou {
                Ok(v) => (v.to_string(), "ok".to_string()),
                Err(e) => (String::new(), format!("error: {e}")),
            };
            let row = [
                r.source.clone(),
                r.attack.clone(),
                r.target.clone(),
                o.seed.to_string(),
                r.clean_miou.to_string(),
                adv,
                status,
            ];
            w.write_record(&row).expect("csv row");
        }
    }
    let bytes = w.into_inner().expect("csv flush");
    String::from_utf8(bytes).expect("csv output is utf-8")
}

pub fn write_csv(path: impl AsRef<Path>, report: &TransferReport) -> Result<()> {
    fs::write(path, format_csv(report))?;
    Ok(())
}

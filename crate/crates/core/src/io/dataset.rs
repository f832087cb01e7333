//! Line-delimited instance sets, best-known-cost tables and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomic, IoError};
use crate::evaluation::{AblationRow, EvalMeta, EvalRecord, EvalReport};
use crate::vrp::Instance;

/// One JSON instance per line.
pub fn instances_to_ljson(instances: &[Instance]) -> Result<String, IoError> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst).map_err(|e| IoError::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_instance_set(path: &Path, instances: &[Instance]) -> Result<(), IoError> {
    write_atomic(path, instances_to_ljson(instances)?.as_bytes())
}

/// Streams instances from line-delimited JSON, validating each one.
pub fn instance_stream<R: BufRead>(reader: R) -> impl Iterator<Item = Result<Instance, IoError>> {
    reader.lines().enumerate().filter_map(|(i, line)| {
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                return Some(Err(IoError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                }))
            }
        };
        if line.trim().is_empty() {
            return None;
        }
        let parsed = serde_json::from_str::<Instance>(&line)
            .map_err(|e| e.to_string())
            .and_then(|inst| inst.validate().map(|_| inst).map_err(|e| e.to_string()));
        Some(parsed.map_err(|message| IoError::Parse { line: i + 1, message }))
    })
}

pub fn parse_instance_set(text: &str) -> Result<Vec<Instance>, IoError> {
    instance_stream(text.as_bytes()).collect()
}

pub fn read_instance_set(path: &Path) -> Result<Vec<Instance>, IoError> {
    let file = std::fs::File::open(path).map_err(|e| IoError::io(path, e))?;
    instance_stream(std::io::BufReader::new(file)).collect()
}

/// Instance name to best-known cost.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BksTable(pub BTreeMap<String, f64>);

impl BksTable {
    /// Parses `name cost` lines (whitespace or comma separated, `#` comments).
    pub fn parse(text: &str) -> Result<Self, IoError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| IoError::Parse { line: i + 1, message: m };
            let toks: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).collect();
            let [name, cost] = toks[..] else {
                return Err(err(format!("expected `name cost`, found `{line}`")));
            };
            let cost: f64 = cost.parse().map_err(|_| err(format!("cannot read cost from `{cost}`")))?;
            if !(cost > 0.0 && cost.is_finite()) {
                return Err(err(format!("cost for `{name}` must be positive")));
            }
            if map.insert(name.to_string(), cost).is_some() {
                return Err(err(format!("`{name}` listed twice")));
            }
        }
        Ok(Self(map))
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| IoError::io(path, e))?)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    /// References aligned with `instances`, looked up by instance name.
    pub fn references_for(&self, instances: &[Instance]) -> Result<Vec<f64>, IoError> {
        instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let name = inst
                    .name
                    .as_deref()
                    .ok_or_else(|| IoError::Format(format!("instance #{i} has no name to look up")))?;
                self.get(name)
                    .ok_or_else(|| IoError::Format(format!("no best-known cost for `{name}`")))
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    meta: EvalMeta,
    mean_cost: f64,
    mean_gap_pct: Option<f64>,
    count: usize,
}

/// A header line (`meta`, aggregates) followed by one record per line.
pub fn report_to_jsonl(report: &EvalReport) -> Result<String, IoError> {
    let header = ReportHeader {
        meta: report.meta.clone(),
        mean_cost: report.mean_cost,
        mean_gap_pct: report.mean_gap_pct,
        count: report.records.len(),
    };
    let fmt = |e: serde_json::Error| IoError::Format(e.to_string());
    let mut out = serde_json::to_string(&header).map_err(fmt)?;
    out.push('\n');
    for r in &report.records {
        out.push_str(&serde_json::to_string(r).map_err(fmt)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn report_from_jsonl(text: &str) -> Result<EvalReport, IoError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| IoError::Format("empty report".into()))?;
    let header: ReportHeader =
        serde_json::from_str(first).map_err(|e| IoError::Parse { line: 1, message: e.to_string() })?;
    let records = lines
        .map(|(i, l)| {
            serde_json::from_str::<EvalRecord>(l).map_err(|e| IoError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if records.len() != header.count {
        return Err(IoError::Format(format!("header announces {} records, found {}", header.count, records.len())));
    }
    Ok(EvalReport {
        meta: header.meta,
        records,
        mean_cost: header.mean_cost,
        mean_gap_pct: header.mean_gap_pct,
    })
}

/// Writes `<path>` as JSONL and `<path>.txt` as a human-readable table.
pub fn write_report(path: &Path, report: &EvalReport) -> Result<(), IoError> {
    write_atomic(path, report_to_jsonl(report)?.as_bytes())?;
    let mut txt = path.as_os_str().to_owned();
    txt.push(".txt");
    write_atomic(Path::new(&txt), format_report_table(report).as_bytes())
}

fn opt3(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.3}"))
}

pub fn format_report_table(report: &EvalReport) -> String {
    let m = &report.meta;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{}  K<={} augment={} round={}{}",
        m.label,
        m.max_trajectories,
        m.augment,
        m.round_distances,
        m.delta.map(|d| format!(" delta={d}")).unwrap_or_default()
    );
    let _ = writeln!(s, "{:<20} {:>12} {:>12} {:>9} {:>10}", "instance", "cost", "ref", "gap_pct", "time_ms");
    for r in &report.records {
        let _ = writeln!(
            s,
            "{:<20} {:>12.4} {:>12} {:>9} {:>10.1}",
            r.instance,
            r.cost,
            r.reference.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
            opt3(r.gap_pct),
            r.time_ms
        );
    }
    let _ = writeln!(s, "mean cost {:.4}  mean gap {}%", report.mean_cost, opt3(report.mean_gap_pct));
    s
}

fn flags(row: &AblationRow) -> String {
    let m = &row.model;
    format!(
        "d_h={} L={} norm={:?} idt={} ff={} dist={} proj={:?} mha2={}",
        m.d_h, m.layers, m.norm, m.use_idt, m.use_ff_query, m.use_dist_heuristic, m.query_projection, m.extra_mha
    )
}

/// Gap (or mean cost when no reference exists) per variant and size, with
/// every row's configuration echoed below the table.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let sizes: Vec<usize> = rows.first().map(|r| r.cells.iter().map(|c| c.size).collect()).unwrap_or_default();
    let _ = write!(s, "{:<24}", "variant");
    for n in &sizes {
        let _ = write!(s, " {:>18}", format!("N={n} gap%/cost"));
    }
    s.push('\n');
    for row in rows {
        let _ = write!(s, "{:<24}", row.label);
        for c in &row.cells {
            let _ = write!(s, " {:>18}", format!("{}/{:.4}", opt3(c.mean_gap_pct), c.mean_cost));
        }
        s.push('\n');
    }
    s.push('\n');
    for row in rows {
        let _ = writeln!(s, "{}: {}", row.label, flags(row));
    }
    s
}

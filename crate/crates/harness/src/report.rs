//! Result tables as CSV and Markdown.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use scenereg_core::evalmetrics::JudgmentCategory;
use scenereg_core::features::Variant;
use scenereg_core::regmodel::Family;
use scenereg_core::sceneworld::SplitName;

use crate::error::{write_atomic, HarnessError, Result};
use crate::experiment::{EntryRecord, RunRecord, SplitResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportKind {
    /// BLEU-1/2 and CIDEr per system, noise level and split.
    Metrics,
    /// CIDEr relative to the same system at noise 0.
    RelativeCider,
    /// Oracle judgment percentages.
    Judgments,
    /// Adequacy vs. target-class coverage correlation.
    Correlation,
    /// Attention allocation.
    Attention,
}

impl ReportKind {
    pub const ALL: [ReportKind; 5] = [
        ReportKind::Metrics,
        ReportKind::RelativeCider,
        ReportKind::Judgments,
        ReportKind::Correlation,
        ReportKind::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::Metrics => "metrics",
            ReportKind::RelativeCider => "relative_cider",
            ReportKind::Judgments => "judgments",
            ReportKind::Correlation => "correlation",
            ReportKind::Attention => "attention",
        }
    }
}

impl fmt::Display for ReportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReportKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| HarnessError::Config(format!("unknown report `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Int(usize),
    /// Printed with the given number of decimals in Markdown.
    Num(f64, usize),
    Missing,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Int(n) => n.to_string(),
            Cell::Num(v, _) => v.to_string(),
            Cell::Missing => "NA".into(),
        }
    }

    fn markdown(&self) -> String {
        match self {
            Cell::Num(v, d) => format!("{v:.d$}"),
            other => other.csv(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v, _) => Some(*v),
            Cell::Int(n) => Some(*n as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub kind: ReportKind,
    pub header: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ReportTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::csv))?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n", self.header.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(Cell::markdown).collect();
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }
}

/// Completed entries of one (family, variant, noise) cell, over seeds.
struct Group<'a> {
    family: Family,
    variant: Variant,
    noise: f64,
    entries: Vec<&'a EntryRecord>,
}

impl Group<'_> {
    fn system(&self) -> String {
        format!("{}-{}", self.family, self.variant)
    }

    fn splits(&self, split: SplitName) -> Vec<&SplitResult> {
        self.entries.iter().filter_map(|e| e.splits.get(&split)).collect()
    }

    /// Seed mean of `f` over entries where it is defined.
    fn mean(&self, split: SplitName, f: impl Fn(&SplitResult) -> Option<f64>) -> Cell {
        let vals: Vec<f64> = self.splits(split).into_iter().filter_map(f).collect();
        if vals.is_empty() {
            Cell::Missing
        } else {
            Cell::Num(vals.iter().sum::<f64>() / vals.len() as f64, 4)
        }
    }

    fn lead(&self) -> Vec<Cell> {
        vec![
            Cell::Text(self.system()),
            Cell::Text(format!("{:.2}", self.noise)),
            Cell::Int(self.entries.len()),
        ]
    }
}

fn groups(record: &RunRecord) -> Vec<Group<'_>> {
    let mut out: Vec<Group> = Vec::new();
    for e in record.completed() {
        let k = e.key;
        match out
            .iter_mut()
            .find(|g| g.family == k.family && g.variant == k.variant && g.noise == k.noise)
        {
            Some(g) => g.entries.push(e),
            None => out.push(Group {
                family: k.family,
                variant: k.variant,
                noise: k.noise,
                entries: vec![e],
            }),
        }
    }
    out.sort_by(|a, b| {
        (a.family, a.variant)
            .cmp(&(b.family, b.variant))
            .then(a.noise.total_cmp(&b.noise))
    });
    out
}

fn header(fixed: &[&str], per_split: &[&str], splits: &[SplitName]) -> Vec<String> {
    let mut h: Vec<String> = fixed.iter().map(|s| s.to_string()).collect();
    for s in splits {
        h.extend(per_split.iter().map(|c| format!("{s}_{c}")));
    }
    h
}

pub fn build_table(record: &RunRecord, kind: ReportKind) -> Result<ReportTable> {
    let splits = &record.config.eval_splits;
    let groups = groups(record);
    let mut rows = Vec::new();
    let header = match kind {
        ReportKind::Metrics => {
            for g in &groups {
                let mut row = g.lead();
                for &s in splits {
                    row.push(g.mean(s, |r| Some(r.eval.metrics.mean.bleu1)));
                    row.push(g.mean(s, |r| Some(r.eval.metrics.mean.bleu2)));
                    row.push(g.mean(s, |r| Some(r.eval.metrics.mean.cider)));
                }
                rows.push(row);
            }
            header(&["system", "noise", "seeds"], &["bleu1", "bleu2", "cider"], splits)
        }
        ReportKind::RelativeCider => {
            for g in &groups {
                let base = groups
                    .iter()
                    .find(|b| b.family == g.family && b.variant == g.variant && b.noise == 0.0)
                    .ok_or_else(|| HarnessError::MissingBaseline(g.system()))?;
                for &s in splits {
                    let cider = |grp: &Group| grp.mean(s, |r| Some(r.eval.metrics.mean.cider)).as_f64();
                    let (c, b) = (cider(g), cider(base));
                    let rel = match (c, b) {
                        (Some(c), Some(b)) if b != 0.0 => Cell::Num(c / b, 4),
                        _ => Cell::Missing,
                    };
                    let mut row = g.lead();
                    row.insert(1, Cell::Text(s.to_string()));
                    row.push(c.map_or(Cell::Missing, |v| Cell::Num(v, 4)));
                    row.push(rel);
                    rows.push(row);
                }
            }
            vec!["system", "split", "noise", "seeds", "cider", "relative_cider"]
                .into_iter()
                .map(String::from)
                .collect()
        }
        ReportKind::Judgments => {
            let order = [JudgmentCategory::A, JudgmentCategory::F, JudgmentCategory::O, JudgmentCategory::M];
            for g in &groups {
                for &s in splits {
                    for protocol in ["run0", "mean"] {
                        let mut row = g.lead();
                        row.insert(1, Cell::Text(s.to_string()));
                        row.push(Cell::Text(protocol.into()));
                        for c in order {
                            row.push(g.mean(s, |r| {
                                Some(if protocol == "run0" {
                                    r.eval.judgments_run0.percent[&c]
                                } else {
                                    r.eval.judgments_mean[&c]
                                })
                            }));
                        }
                        rows.push(row);
                    }
                }
            }
            vec!["system", "split", "noise", "seeds", "protocol", "A", "F", "O", "M"]
                .into_iter()
                .map(String::from)
                .collect()
        }
        ReportKind::Correlation => {
            for g in &groups {
                for &s in splits {
                    let mut row = g.lead();
                    row.insert(1, Cell::Text(s.to_string()));
                    row.push(g.mean(s, |r| r.analysis.correlation.result.map(|c| c.r)));
                    row.push(g.mean(s, |r| r.analysis.correlation.result.map(|c| c.p_value)));
                    row.push(g.mean(s, |r| Some(r.eval.items_run0.len() as f64)));
                    rows.push(row);
                }
            }
            vec!["system", "split", "noise", "seeds", "r", "p", "n"]
                .into_iter()
                .map(String::from)
                .collect()
        }
        ReportKind::Attention => {
            for g in &groups {
                for &s in splits {
                    if g.splits(s).iter().all(|r| r.analysis.attention.is_none()) {
                        continue;
                    }
                    for scope in ["encoder", "decoder"] {
                        let alloc = |r: &SplitResult| {
                            r.analysis
                                .attention
                                .as_ref()
                                .map(|a| if scope == "encoder" { a.encoder } else { a.decoder })
                        };
                        let mut row = g.lead();
                        row.insert(1, Cell::Text(s.to_string()));
                        row.push(Cell::Text(scope.into()));
                        row.push(g.mean(s, |r| alloc(r).map(|a| a.delta)));
                        row.push(g.mean(s, |r| alloc(r).map(|a| a.alpha_t)));
                        row.push(g.mean(s, |r| alloc(r).map(|a| a.alpha_l)));
                        row.push(g.mean(s, |r| alloc(r).map(|a| a.alpha_c)));
                        row.push(g.mean(s, |r| {
                            r.analysis.attention.as_ref().and_then(|a| {
                                if scope == "encoder" {
                                    a.alpha_tgt_encoder
                                } else {
                                    a.alpha_tgt_decoder
                                }
                            })
                        }));
                        rows.push(row);
                    }
                }
            }
            vec![
                "system", "split", "noise", "seeds", "scope", "delta", "alpha_t", "alpha_l", "alpha_c", "alpha_tgt",
            ]
            .into_iter()
            .map(String::from)
            .collect()
        }
    };
    Ok(ReportTable { kind, header, rows })
}

/// Writes `<kind>.csv` and `<kind>.md` into `dir`.
pub fn emit_report(record: &RunRecord, kind: ReportKind, dir: &Path) -> Result<ReportTable> {
    let table = build_table(record, kind)?;
    write_atomic(&dir.join(format!("{kind}.csv")), table.to_csv()?.as_bytes())?;
    write_atomic(&dir.join(format!("{kind}.md")), table.to_markdown().as_bytes())?;
    Ok(table)
}

/// Every report kind; a missing baseline skips only the relative table.
pub fn emit_all(record: &RunRecord, dir: &Path) -> Result<BTreeMap<ReportKind, ReportTable>> {
    let mut out = BTreeMap::new();
    for kind in ReportKind::ALL {
        match emit_report(record, kind, dir) {
            Ok(t) => {
                out.insert(kind, t);
            }
            Err(HarnessError::MissingBaseline(s)) => log::warn!("skipping {kind}: no noise-0.0 baseline for {s}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

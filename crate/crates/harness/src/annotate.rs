//! Human judgments: agreement, majority labels and disagreement with the
//! oracle judge.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use scenereg_core::evalmetrics::{fleiss_kappa, majority_vote, AgreementReport, JudgmentCategory};
use scenereg_core::sceneworld::SplitName;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, HarnessError, Result};
use crate::experiment::RunRecord;
use crate::inference::JudgmentTally;

/// One annotated prediction: all annotators' labels for one sample of one
/// matrix entry (named by its run directory, e.g. `encdec-vis-1.00-1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub entry: String,
    pub split: SplitName,
    pub sample_id: String,
    pub labels: Vec<JudgmentCategory>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanEval {
    pub n_items: usize,
    pub agreement: Option<AgreementReport>,
    /// Why agreement is undefined, when it is.
    pub agreement_note: Option<String>,
    /// Majority label keyed by `<split>/<sample id>`.
    pub majority: BTreeMap<String, JudgmentCategory>,
    pub majority_tally: JudgmentTally,
    /// Share of items whose majority label differs from the oracle's.
    pub discrepancy_rate: f64,
    pub discrepancies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub systems: BTreeMap<String, HumanEval>,
    /// Annotations that match no recorded prediction.
    pub unknown: Vec<String>,
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationLine>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|source| HarnessError::Json {
                path: path.to_path_buf(),
                source,
            })
        })
        .collect()
}

/// Merges annotations into `record`; unknown references are reported, not
/// fatal.
pub fn ingest(lines: &[AnnotationLine], record: &mut RunRecord) -> Result<IngestReport> {
    let mut unknown = Vec::new();
    let mut by_entry: BTreeMap<&str, Vec<(&AnnotationLine, JudgmentCategory)>> = BTreeMap::new();
    for line in lines {
        let oracle = record
            .completed()
            .find(|e| e.key.dir_name() == line.entry)
            .and_then(|e| e.splits.get(&line.split))
            .and_then(|s| s.eval.items_run0.iter().find(|j| j.sample_id == line.sample_id))
            .map(|j| j.category);
        match oracle {
            Some(o) => by_entry.entry(line.entry.as_str()).or_default().push((line, o)),
            None => unknown.push(format!("{}/{}/{}", line.entry, line.split, line.sample_id)),
        }
    }
    let mut systems = BTreeMap::new();
    for (entry, items) in by_entry {
        let ratings: Vec<Vec<JudgmentCategory>> = items.iter().map(|(l, _)| l.labels.clone()).collect();
        let (agreement, agreement_note) = match fleiss_kappa(&ratings) {
            Ok(a) => (Some(a), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let mut majority = BTreeMap::new();
        let mut discrepancies = Vec::new();
        let mut labels = Vec::with_capacity(items.len());
        for (line, oracle) in &items {
            let m = majority_vote(&line.labels)?;
            let id = format!("{}/{}", line.split, line.sample_id);
            if m != *oracle {
                discrepancies.push(id.clone());
            }
            labels.push(m);
            majority.insert(id, m);
        }
        let eval = HumanEval {
            n_items: items.len(),
            agreement,
            agreement_note,
            majority,
            majority_tally: JudgmentTally::of(&labels),
            discrepancy_rate: discrepancies.len() as f64 / items.len() as f64,
            discrepancies,
        };
        if let Some(e) = record.entries.iter_mut().find(|e| e.key.dir_name() == entry) {
            e.human = Some(eval.clone());
        }
        systems.insert(entry.to_string(), eval);
    }
    Ok(IngestReport { systems, unknown })
}

pub fn ingest_annotations(path: &Path, record: &mut RunRecord) -> Result<IngestReport> {
    ingest(&read_annotations(path)?, record)
}

//! Inference: beam search over extract/skip sequences, summary assembly and
//! the Lead-3 baseline.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{io_err, CorpusError, Document, Sentence};
use crate::extractor::{selection_update, Extractor};
use crate::numeric::{log_sigmoid, NumericError};

pub const DEFAULT_BEAM: usize = 10;
/// Most sentences a decoded summary may contain.
pub const DEFAULT_MAX_SELECTED: usize = 4;

#[derive(Clone, Debug, PartialEq)]
struct Hypothesis {
    decisions: Vec<bool>,
    state: Vec<f64>,
    score: f64,
    selected: usize,
}

/// Best decision sequence found and its total log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub decisions: Vec<bool>,
    pub score: f64,
}

/// Keeps the `beam` best partial sequences by summed `log π` at every step.
/// Ties go to skipping, then to the earlier parent. Once `max_selected`
/// sentences are chosen a hypothesis can only skip.
pub fn beam_search(model: &Extractor, doc: &Document, beam: usize, max_selected: usize) -> Result<Decoded, NumericError> {
    if beam == 0 {
        return Err(NumericError::Contract("beam size must be positive".into()));
    }
    let enc = model.encode_document(doc)?;
    let mut hyps = vec![Hypothesis {
        decisions: Vec::with_capacity(doc.len()),
        state: vec![0.0; model.config.context_dim()],
        score: 0.0,
        selected: 0,
    }];
    for t in 0..enc.len() {
        // (score, y, parent)
        let mut cands: Vec<(f64, bool, usize)> = Vec::with_capacity(2 * hyps.len());
        for (i, h) in hyps.iter().enumerate() {
            let logit = model.step_logit(&enc, t, &h.state)?;
            cands.push((h.score + log_sigmoid(-logit), false, i));
            if h.selected < max_selected {
                cands.push((h.score + log_sigmoid(logit), true, i));
            }
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(beam);
        hyps = cands
            .into_iter()
            .map(|(score, y, parent)| {
                let p = &hyps[parent];
                let mut decisions = p.decisions.clone();
                decisions.push(y);
                Hypothesis {
                    decisions,
                    state: selection_update(&p.state, &enc.selection[t], y),
                    score,
                    selected: p.selected + usize::from(y),
                }
            })
            .collect();
    }
    let best = hyps.swap_remove(0);
    Ok(Decoded {
        decisions: best.decisions,
        score: best.score,
    })
}

/// Positions of the selected sentences.
pub fn selected_indices(decisions: &[bool]) -> Vec<usize> {
    decisions.iter().enumerate().filter(|(_, &y)| y).map(|(i, _)| i).collect()
}

/// The selected sentences in document order.
pub fn extract_summary<'a>(doc: &'a Document, decisions: &[bool]) -> Result<Vec<&'a Sentence>, NumericError> {
    if decisions.len() != doc.len() {
        return Err(NumericError::Shape {
            op: "extract",
            lhs: vec![decisions.len()],
            rhs: vec![doc.len()],
        });
    }
    Ok(selected_indices(decisions).into_iter().map(|i| &doc.sentences[i]).collect())
}

/// Decisions selecting the first `min(3, n)` sentences.
pub fn lead3_decisions(doc: &Document) -> Vec<bool> {
    (0..doc.len()).map(|i| i < 3).collect()
}

pub fn lead3(doc: &Document) -> Vec<&Sentence> {
    doc.sentences.iter().take(3).collect()
}

/// One line of a summary output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub id: String,
    pub selected_indices: Vec<usize>,
    pub summary: Vec<String>,
}

impl SummaryRecord {
    pub fn new(doc: &Document, decisions: &[bool]) -> Result<Self, NumericError> {
        Ok(SummaryRecord {
            id: doc.id.clone(),
            selected_indices: selected_indices(decisions),
            summary: extract_summary(doc, decisions)?.into_iter().map(|s| s.text.clone()).collect(),
        })
    }
}

pub fn write_summaries(path: &Path, records: &[SummaryRecord]) -> Result<(), CorpusError> {
    let io = |e| io_err(path)(e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("summary records serialize");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_summaries(path: &Path) -> Result<Vec<SummaryRecord>, CorpusError> {
    let io = |e| io_err(path)(e);
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

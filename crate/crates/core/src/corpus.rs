//! Corpus loading, tokenization, vocabulary, oracle labels and coherence
//! triplet sampling.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOUNDARY: u32 = 2;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOUNDARY_TOKEN: &str = "<boundary>";
const SPECIALS: [&str; 3] = [PAD_TOKEN, UNK_TOKEN, BOUNDARY_TOKEN];

/// Default cap on sentences kept per document.
pub const DEFAULT_MAX_SENTENCES: usize = 80;
/// Default encoded sentence length.
pub const DEFAULT_MAX_LEN: usize = 50;
/// Default vocabulary size including the three specials.
pub const DEFAULT_VOCAB_SIZE: usize = 150_000;
/// Greedy oracle labelling stops after this many sentences.
pub const ORACLE_MAX_SELECTED: usize = 4;
/// Negatives must lie strictly closer than this to the positive.
pub const NEGATIVE_WINDOW: usize = 9;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: document `{id}` has no non-empty sentences")]
    EmptyDocument { line: usize, id: String },
    #[error("vocabulary file {path}: {message}")]
    Vocab { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lowercases, splits on whitespace and isolates every punctuation or
/// symbol character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                current.extend(c.to_lowercase());
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_lowercase().collect());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::specials_only()
    }
}

impl Vocabulary {
    pub fn specials_only() -> Self {
        let id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    /// Keeps the `max_size - 3` most frequent tokens of the records'
    /// sentences and highlights; ties go to the lexicographically smaller
    /// token.
    pub fn build<'a, I>(records: I, max_size: usize) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = &'a Record>,
    {
        if max_size < 4 {
            return Err(CorpusError::Invalid(format!(
                "vocabulary size must be at least 4, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for record in records {
            for text in record.sentences.iter().chain(&record.highlights) {
                for tok in tokenize(text) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());

        let mut vocab = Vocabulary::specials_only();
        for (tok, _) in ranked {
            vocab.push(tok);
        }
        Ok(vocab)
    }

    fn push(&mut self, token: String) {
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    /// Writes one token per line, the three specials first.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        for tok in &self.id_to_token {
            writeln!(w, "{tok}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
        let mut vocab = Vocabulary::specials_only();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(path))?;
            if i < SPECIALS.len() {
                if line != SPECIALS[i] {
                    return Err(CorpusError::Vocab {
                        path: path.to_path_buf(),
                        message: format!("line {} should be `{}`, found `{line}`", i + 1, SPECIALS[i]),
                    });
                }
                continue;
            }
            if vocab.token_to_id.contains_key(&line) {
                return Err(CorpusError::Vocab {
                    path: path.to_path_buf(),
                    message: format!("duplicate token `{line}` on line {}", i + 1),
                });
            }
            vocab.push(line);
        }
        if vocab.len() < SPECIALS.len() {
            return Err(CorpusError::Vocab {
                path: path.to_path_buf(),
                message: "missing special-token header".into(),
            });
        }
        Ok(vocab)
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }
}

/// Maps tokens to ids, truncating or right-padding with [`PAD`] to exactly
/// `max_len` entries.
pub fn encode_sentence<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = tokens
        .iter()
        .take(max_len)
        .map(|t| vocab.id(t.as_ref()))
        .collect();
    ids.resize(max_len, PAD);
    ids
}

/// One tokenized sentence with its fixed-length encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Sentence {
    pub text: String,
    /// All tokens, untruncated.
    pub tokens: Vec<String>,
    /// Exactly `max_len` ids.
    pub ids: Vec<u32>,
}

impl Sentence {
    pub fn new(text: &str, vocab: &Vocabulary, max_len: usize) -> Self {
        let tokens = tokenize(text);
        let ids = encode_sentence(&tokens, vocab, max_len);
        Sentence {
            text: text.to_string(),
            tokens,
            ids,
        }
    }

    /// Start-of-summary stand-in: one boundary token followed by padding.
    pub fn placeholder(max_len: usize) -> Self {
        let mut ids = vec![PAD; max_len];
        if let Some(first) = ids.first_mut() {
            *first = BOUNDARY;
        }
        Sentence {
            text: String::new(),
            tokens: vec![BOUNDARY_TOKEN.to_string()],
            ids,
        }
    }

    /// Number of positions that carry real tokens, `min(tokens, max_len)`.
    pub fn encoded_len(&self) -> usize {
        self.tokens.len().min(self.ids.len())
    }
}

/// A corpus line as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub sentences: Vec<String>,
    pub highlights: Vec<String>,
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    sentences: Option<Vec<String>>,
    highlights: Option<Vec<String>>,
}

/// An encoded document.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub id: String,
    pub sentences: Vec<Sentence>,
    pub highlights: Vec<Sentence>,
}

impl Document {
    pub fn encode(record: &Record, vocab: &Vocabulary, max_len: usize) -> Result<Self, CorpusError> {
        if record.sentences.is_empty() {
            return Err(CorpusError::Invalid(format!(
                "document `{}` has no sentences",
                record.id
            )));
        }
        Ok(Document {
            id: record.id.clone(),
            sentences: record
                .sentences
                .iter()
                .map(|s| Sentence::new(s, vocab, max_len))
                .collect(),
            highlights: record
                .highlights
                .iter()
                .map(|s| Sentence::new(s, vocab, max_len))
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Highlight tokens concatenated in order.
    pub fn reference_tokens(&self) -> Vec<String> {
        flatten(self.highlights.iter())
    }
}

/// Tokens of several sentences concatenated in order.
pub fn flatten<'a>(sentences: impl IntoIterator<Item = &'a Sentence>) -> Vec<String> {
    sentences
        .into_iter()
        .flat_map(|s| s.tokens.iter().cloned())
        .collect()
}

/// Streams [`Record`]s from a JSON-lines corpus file.
pub struct CorpusReader {
    lines: std::io::Lines<BufReader<File>>,
    path: PathBuf,
    line_no: usize,
    max_sentences: usize,
}

impl CorpusReader {
    pub fn open(path: &Path, max_sentences: usize) -> Result<Self, CorpusError> {
        let file = File::open(path).map_err(io_err(path))?;
        Ok(CorpusReader {
            lines: BufReader::new(file).lines(),
            path: path.to_path_buf(),
            line_no: 0,
            max_sentences,
        })
    }
}

/// Parses one corpus line. Blank sentences are dropped and the sentence
/// list is truncated to `max_sentences`.
pub fn parse_record(line: &str, line_no: usize, max_sentences: usize) -> Result<Record, CorpusError> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    let id = raw.id.ok_or(CorpusError::MissingField {
        line: line_no,
        field: "id",
    })?;
    let mut sentences: Vec<String> = raw
        .sentences
        .ok_or(CorpusError::MissingField {
            line: line_no,
            field: "sentences",
        })?
        .into_iter()
        .filter(|s| !tokenize(s).is_empty())
        .collect();
    let highlights: Vec<String> = raw
        .highlights
        .ok_or(CorpusError::MissingField {
            line: line_no,
            field: "highlights",
        })?
        .into_iter()
        .filter(|s| !tokenize(s).is_empty())
        .collect();
    if sentences.is_empty() {
        return Err(CorpusError::EmptyDocument { line: line_no, id });
    }
    sentences.truncate(max_sentences);
    Ok(Record {
        id,
        sentences,
        highlights,
    })
}

impl Iterator for CorpusReader {
    type Item = Result<Record, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_record(&line, self.line_no, self.max_sentences));
        }
    }
}

pub fn load_corpus(path: &Path, max_sentences: usize) -> Result<Vec<Record>, CorpusError> {
    CorpusReader::open(path, max_sentences)?.collect()
}

pub fn write_corpus(path: &Path, records: &[Record]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| CorpusError::Invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// `(S_A, S_B+, S_B-)` for ranking-loss training.
#[derive(Clone, Debug, PartialEq)]
pub struct CoherenceTriplet {
    pub anchor: Sentence,
    pub positive: Sentence,
    pub negative: Sentence,
    pub anchor_pos: usize,
    pub negative_pos: usize,
}

impl CoherenceTriplet {
    pub fn positive_pos(&self) -> usize {
        self.anchor_pos + 1
    }
}

/// Samples an adjacent pair plus a nearby negative from `doc`.
///
/// The anchor is uniform over positions that have a successor; the
/// negative is uniform over positions other than the anchor and the
/// positive that lie fewer than [`NEGATIVE_WINDOW`] sentences from the
/// positive. Returns `None` for documents shorter than three sentences.
pub fn sample_coherence_triplet<R: Rng + ?Sized>(doc: &Document, rng: &mut R) -> Option<CoherenceTriplet> {
    let n = doc.len();
    if n < 3 {
        return None;
    }
    let anchor = rng.gen_range(0..n - 1);
    let positive = anchor + 1;
    let lo = positive.saturating_sub(NEGATIVE_WINDOW - 1);
    let hi = (positive + NEGATIVE_WINDOW - 1).min(n - 1);
    let candidates: Vec<usize> = (lo..=hi).filter(|&p| p != positive && p != anchor).collect();
    if candidates.is_empty() {
        return None;
    }
    let negative = candidates[rng.gen_range(0..candidates.len())];
    Some(CoherenceTriplet {
        anchor: doc.sentences[anchor].clone(),
        positive: doc.sentences[positive].clone(),
        negative: doc.sentences[negative].clone(),
        anchor_pos: anchor,
        negative_pos: negative,
    })
}

/// Ground-truth extraction labels and the greedy score trace that
/// produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtractionLabels {
    pub labels: Vec<bool>,
    /// Summary score after each accepted sentence.
    pub trace: Vec<f64>,
}

impl ExtractionLabels {
    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(|(_, &y)| y).map(|(i, _)| i)
    }
}

/// Greedy oracle: repeatedly add the sentence that most increases
/// `score(selected tokens, reference tokens)`, stopping when nothing
/// strictly improves or `max_selected` sentences are chosen. Selected
/// sentences are scored in document order; ties go to the earlier sentence.
pub fn generate_oracle_labels<F>(doc: &Document, score: F, max_selected: usize) -> ExtractionLabels
where
    F: Fn(&[String], &[String]) -> f64,
{
    let reference = doc.reference_tokens();
    let mut labels = vec![false; doc.len()];
    let mut trace = Vec::new();
    let mut current = 0.0;
    while trace.len() < max_selected {
        let mut best: Option<(usize, f64)> = None;
        let open: Vec<usize> = (0..doc.len()).filter(|&i| !labels[i]).collect();
        for i in open {
            labels[i] = true;
            let candidate = flatten(
                doc.sentences
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &y)| y)
                    .map(|(s, _)| s),
            );
            labels[i] = false;
            let s = score(&candidate, &reference);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        match best {
            Some((i, s)) if s > current => {
                labels[i] = true;
                current = s;
                trace.push(s);
            }
            _ => break,
        }
    }
    ExtractionLabels { labels, trace }
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    id: String,
    labels: Vec<u8>,
}

pub fn write_labels(path: &Path, labels: &[(String, Vec<bool>)]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for (id, ys) in labels {
        let line = LabelLine {
            id: id.clone(),
            labels: ys.iter().map(|&y| u8::from(y)).collect(),
        };
        let s = serde_json::to_string(&line).map_err(|e| CorpusError::Invalid(e.to_string()))?;
        writeln!(w, "{s}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, Vec<bool>)>, CorpusError> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabelLine = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if parsed.labels.iter().any(|&y| y > 1) {
            return Err(CorpusError::Parse {
                line: i + 1,
                message: "labels must be 0 or 1".into(),
            });
        }
        out.push((parsed.id, parsed.labels.into_iter().map(|y| y == 1).collect()));
    }
    Ok(out)
}

//! Streaming reader and writer for MRQA-format datasets, plus SQuAD-style
//! prediction files.
//!
//! A dataset is line-delimited JSON. The first line is `{"header": {...}}`;
//! every following line holds one context with its questions:
//!
//! ```text
//! {"context": "...", "qas": [{"qid": "...", "question": "...", "answers": ["..."],
//!   "detected_answers": [{"text": "...", "char_spans": [[start, end]]}]}]}
//! ```
//!
//! Only the fields above are read; anything else (pre-computed token spans
//! for some other tokenizer, for instance) is ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use flate2::read::MultiGzDecoder;
use serde::de::{self, MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::align::{codepoint_span_to_byte_span, CharSpan, SpanConvention};
use crate::bpe::ByteSpan;
use crate::consist::FixOutcome;

#[derive(Debug, Error)]
pub enum ReadError {
    #[error("I/O error")]
    Io(#[from] io::Error),
    #[error("missing header: the first line must be a {{\"header\": ...}} object")]
    MissingHeader,
    #[error("line {line}: malformed JSON")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: missing or mistyped field `{field}`{}", qid_suffix(.qid))]
    MissingField {
        line: usize,
        field: &'static str,
        qid: Option<String>,
    },
    #[error("line {line}, qid {qid}: span {span:?} does not match answer {answer:?} ({reason})")]
    SpanMismatch {
        line: usize,
        qid: String,
        answer: String,
        span: CharSpan,
        reason: String,
    },
}

fn qid_suffix(qid: &Option<String>) -> String {
    qid.as_ref().map(|q| format!(" (qid {q})")).unwrap_or_default()
}

impl ReadError {
    /// Fatal errors end the stream; the others concern one record.
    pub fn is_fatal(&self) -> bool {
        matches!(self, ReadError::Io(_) | ReadError::MissingHeader | ReadError::Json { .. })
    }
}

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("I/O error")]
    Io(#[from] io::Error),
    #[error("invalid predictions file")]
    Json(#[from] serde_json::Error),
}

/// A detected answer occurrence: its text and where it sits in the context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectedAnswer {
    pub text: String,
    pub spans: Vec<CharSpan>,
}

/// One (context, question) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractiveExample {
    pub qid: String,
    /// Shared by every question asked about the same context record.
    pub context: Arc<str>,
    pub question: String,
    pub gold_answers: Vec<String>,
    pub detected: Vec<DetectedAnswer>,
}

impl ExtractiveExample {
    /// Answer texts in preference order: detected answers first, then any
    /// gold answer not already listed.
    pub fn answer_texts(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in self
            .detected
            .iter()
            .map(|d| d.text.as_str())
            .chain(self.gold_answers.iter().map(String::as_str))
        {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }

    /// The answer used for analysis and repair, with its first span if any.
    pub fn primary_answer(&self) -> Option<(&str, Option<CharSpan>)> {
        if let Some(d) = self.detected.first() {
            return Some((d.text.as_str(), d.spans.first().copied()));
        }
        self.gold_answers.first().map(|a| (a.as_str(), None))
    }

    /// Gold strings for scoring; detected texts when `answers` is empty.
    pub fn scoring_answers(&self) -> Vec<&str> {
        if self.gold_answers.is_empty() {
            self.detected.iter().map(|d| d.text.as_str()).collect()
        } else {
            self.gold_answers.iter().map(String::as_str).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetHeader {
    pub dataset: String,
    /// Every other header field, passed through untouched.
    pub extra: Map<String, Value>,
}

impl DatasetHeader {
    pub fn named(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            extra: Map::new(),
        }
    }

    fn to_value(&self) -> Value {
        let mut m = self.extra.clone();
        m.insert("dataset".into(), Value::String(self.dataset.clone()));
        let mut outer = Map::new();
        outer.insert("header".into(), Value::Object(m));
        Value::Object(outer)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// `None` sniffs the gzip magic bytes.
    pub gzip: Option<bool>,
    pub convention: SpanConvention,
}

/// Lazily yields examples, one record line at a time.
pub struct DatasetReader<R> {
    lines: io::Lines<R>,
    line_no: usize,
    convention: SpanConvention,
    pending: std::collections::VecDeque<Result<ExtractiveExample, ReadError>>,
    done: bool,
}

type BoxedLines = BufReader<Box<dyn Read + Send>>;

/// Reads the header and returns a stream over the remaining records.
pub fn read_dataset<R: Read + Send + 'static>(
    source: R,
    options: ReadOptions,
) -> Result<(DatasetHeader, DatasetReader<BoxedLines>), ReadError> {
    let mut buffered = BufReader::new(source);
    let gzip = match options.gzip {
        Some(g) => g,
        None => buffered.fill_buf()?.starts_with(&[0x1f, 0x8b]),
    };
    let inner: Box<dyn Read + Send> = if gzip {
        Box::new(MultiGzDecoder::new(buffered))
    } else {
        Box::new(buffered)
    };
    let mut lines = BufReader::new(inner).lines();

    let mut line_no = 0;
    let header = loop {
        line_no += 1;
        let Some(line) = lines.next() else {
            return Err(ReadError::MissingHeader);
        };
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|source| ReadError::Json {
            line: line_no,
            source,
        })?;
        break parse_header(value)?;
    };

    Ok((
        header,
        DatasetReader {
            lines,
            line_no,
            convention: options.convention,
            pending: Default::default(),
            done: false,
        },
    ))
}

pub fn open_dataset(
    path: impl AsRef<Path>,
    options: ReadOptions,
) -> Result<(DatasetHeader, DatasetReader<BoxedLines>), ReadError> {
    read_dataset(File::open(path)?, options)
}

fn parse_header(value: Value) -> Result<DatasetHeader, ReadError> {
    let Value::Object(mut outer) = value else {
        return Err(ReadError::MissingHeader);
    };
    let Some(Value::Object(mut fields)) = outer.remove("header") else {
        return Err(ReadError::MissingHeader);
    };
    let dataset = match fields.remove("dataset") {
        Some(Value::String(s)) => s,
        _ => String::new(),
    };
    Ok(DatasetHeader {
        dataset,
        extra: fields,
    })
}

impl<R: BufRead> Iterator for DatasetReader<R> {
    type Item = Result<ExtractiveExample, ReadError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(item) = self.pending.pop_front() {
                return Some(item);
            }
            if self.done {
                return None;
            }
            let line = match self.lines.next() {
                None => {
                    self.done = true;
                    return None;
                }
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
                Some(Ok(line)) => line,
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            let value: Value = match serde_json::from_str(&line) {
                Ok(v) => v,
                Err(source) => {
                    self.done = true;
                    return Some(Err(ReadError::Json {
                        line: self.line_no,
                        source,
                    }));
                }
            };
            parse_record(value, self.line_no, self.convention, &mut self.pending);
        }
    }
}

fn parse_record(
    value: Value,
    line: usize,
    convention: SpanConvention,
    out: &mut std::collections::VecDeque<Result<ExtractiveExample, ReadError>>,
) {
    let missing = |field, qid: Option<&str>| ReadError::MissingField {
        line,
        field,
        qid: qid.map(str::to_owned),
    };
    let Some(context) = value.get("context").and_then(Value::as_str) else {
        out.push_back(Err(missing("context", None)));
        return;
    };
    let context: Arc<str> = Arc::from(context);
    let Some(qas) = value.get("qas").and_then(Value::as_array) else {
        out.push_back(Err(missing("qas", None)));
        return;
    };
    for qa in qas {
        out.push_back(parse_qa(qa, &context, line, convention, &missing));
    }
}

fn parse_qa(
    qa: &Value,
    context: &Arc<str>,
    line: usize,
    convention: SpanConvention,
    missing: &dyn Fn(&'static str, Option<&str>) -> ReadError,
) -> Result<ExtractiveExample, ReadError> {
    let qid = qa
        .get("qid")
        .and_then(Value::as_str)
        .filter(|q| !q.is_empty())
        .ok_or_else(|| missing("qid", None))?;
    let question = qa
        .get("question")
        .and_then(Value::as_str)
        .ok_or_else(|| missing("question", Some(qid)))?;
    let gold_answers = match qa.get("answers") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(a)) => a
            .iter()
            .map(|v| v.as_str().map(str::to_owned))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| missing("answers", Some(qid)))?,
        Some(_) => return Err(missing("answers", Some(qid))),
    };
    let mut detected = Vec::new();
    match qa.get("detected_answers") {
        None | Some(Value::Null) => {}
        Some(Value::Array(items)) => {
            for item in items {
                let text = item
                    .get("text")
                    .and_then(Value::as_str)
                    .ok_or_else(|| missing("detected_answers.text", Some(qid)))?;
                let raw_spans = item
                    .get("char_spans")
                    .and_then(Value::as_array)
                    .ok_or_else(|| missing("detected_answers.char_spans", Some(qid)))?;
                let mut spans = Vec::with_capacity(raw_spans.len());
                for pair in raw_spans {
                    let (start, end) = span_pair(pair)
                        .ok_or_else(|| missing("detected_answers.char_spans", Some(qid)))?;
                    let span = CharSpan {
                        start,
                        end,
                        convention,
                    };
                    validate_span(context, text, span).map_err(|reason| ReadError::SpanMismatch {
                        line,
                        qid: qid.to_owned(),
                        answer: text.to_owned(),
                        span,
                        reason,
                    })?;
                    spans.push(span);
                }
                detected.push(DetectedAnswer {
                    text: text.to_owned(),
                    spans,
                });
            }
        }
        Some(_) => return Err(missing("detected_answers", Some(qid))),
    }
    Ok(ExtractiveExample {
        qid: qid.to_owned(),
        context: Arc::clone(context),
        question: question.to_owned(),
        gold_answers,
        detected,
    })
}

fn span_pair(v: &Value) -> Option<(usize, usize)> {
    let a = v.as_array()?;
    if a.len() != 2 {
        return None;
    }
    Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize))
}

/// Checks that `span` of `context` reads as `answer`, tolerating trailing
/// whitespace differences only.
pub fn validate_span(context: &str, answer: &str, span: CharSpan) -> Result<ByteSpan, String> {
    let bytes = codepoint_span_to_byte_span(context, span).map_err(|e| e.to_string())?;
    let found = &context[bytes.start..bytes.end];
    if found.trim_end() == answer.trim_end() {
        Ok(bytes)
    } else {
        Err(format!("context has {found:?}"))
    }
}

#[derive(Serialize)]
struct OutDetected<'a> {
    text: &'a str,
    char_spans: Vec<[usize; 2]>,
}

#[derive(Serialize)]
struct OutQa<'a> {
    qid: &'a str,
    question: &'a str,
    answers: &'a [String],
    detected_answers: Vec<OutDetected<'a>>,
    target_token_ids: &'a [u32],
    fix_method: &'static str,
    context_token_span: Option<[usize; 2]>,
}

#[derive(Serialize)]
struct OutRecord<'a> {
    context: &'a str,
    qas: Vec<OutQa<'a>>,
}

type PendingRecord = (Arc<str>, Vec<(ExtractiveExample, FixOutcome)>);

/// Writes repaired records. Consecutive examples that share a context
/// (as produced by the reader) are written back as one record.
pub struct FixedDatasetWriter<W: Write> {
    sink: W,
    current: Option<PendingRecord>,
    count: usize,
}

impl<W: Write> FixedDatasetWriter<W> {
    pub fn new(mut sink: W, header: &DatasetHeader) -> io::Result<Self> {
        serde_json::to_writer(&mut sink, &header.to_value())?;
        sink.write_all(b"\n")?;
        Ok(Self {
            sink,
            current: None,
            count: 0,
        })
    }

    pub fn write(&mut self, example: ExtractiveExample, outcome: FixOutcome) -> io::Result<()> {
        let same = matches!(&self.current, Some((ctx, _)) if Arc::ptr_eq(ctx, &example.context));
        if !same {
            self.flush_record()?;
            self.current = Some((Arc::clone(&example.context), Vec::new()));
        }
        if let Some((_, items)) = self.current.as_mut() {
            items.push((example, outcome));
        }
        self.count += 1;
        Ok(())
    }

    fn flush_record(&mut self) -> io::Result<()> {
        let Some((context, items)) = self.current.take() else {
            return Ok(());
        };
        let qas = items
            .iter()
            .map(|(ex, fix)| OutQa {
                qid: &ex.qid,
                question: &ex.question,
                answers: &ex.gold_answers,
                detected_answers: ex
                    .detected
                    .iter()
                    .map(|d| OutDetected {
                        text: &d.text,
                        char_spans: d.spans.iter().map(|s| [s.start, s.end]).collect(),
                    })
                    .collect(),
                target_token_ids: &fix.target_ids,
                fix_method: fix.method.as_str(),
                context_token_span: fix.context_span.map(|s| [s.start, s.end]),
            })
            .collect();
        serde_json::to_writer(
            &mut self.sink,
            &OutRecord {
                context: &context,
                qas,
            },
        )?;
        self.sink.write_all(b"\n")
    }

    /// Flushes the last record and returns the number of examples written
    /// together with the sink.
    pub fn finish(mut self) -> io::Result<(usize, W)> {
        self.flush_record()?;
        self.sink.flush()?;
        Ok((self.count, self.sink))
    }
}

pub fn write_fixed_dataset<W: Write>(
    sink: W,
    header: &DatasetHeader,
    items: impl IntoIterator<Item = (ExtractiveExample, FixOutcome)>,
) -> io::Result<usize> {
    let mut w = FixedDatasetWriter::new(sink, header)?;
    for (ex, fix) in items {
        w.write(ex, fix)?;
    }
    Ok(w.finish()?.0)
}

/// Predicted answer text per question id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PredictionSet {
    answers: BTreeMap<String, String>,
}

impl PredictionSet {
    pub fn get(&self, qid: &str) -> Option<&str> {
        self.answers.get(qid).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.answers.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn insert(&mut self, qid: impl Into<String>, answer: impl Into<String>) -> Option<String> {
        self.answers.insert(qid.into(), answer.into())
    }
}

impl FromIterator<(String, String)> for PredictionSet {
    fn from_iter<T: IntoIterator<Item = (String, String)>>(iter: T) -> Self {
        Self {
            answers: iter.into_iter().collect(),
        }
    }
}

impl<'de> Deserialize<'de> for PredictionSet {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct PredVisitor;

        impl<'de> Visitor<'de> for PredVisitor {
            type Value = PredictionSet;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object mapping question ids to answer strings")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<PredictionSet, A::Error> {
                let mut answers = BTreeMap::new();
                while let Some(qid) = map.next_key::<String>()? {
                    let answer: String = map.next_value()?;
                    if answers.contains_key(&qid) {
                        return Err(de::Error::custom(format!("duplicate question id {qid:?}")));
                    }
                    answers.insert(qid, answer);
                }
                Ok(PredictionSet { answers })
            }
        }

        deserializer.deserialize_map(PredVisitor)
    }
}

pub fn read_predictions(source: impl Read) -> Result<PredictionSet, PredictionError> {
    Ok(serde_json::from_reader(source)?)
}

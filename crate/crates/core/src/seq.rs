//! Event sequences, relevance labels and datasets, plus their line-delimited
//! JSON file formats.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, CoreError, Result};

/// Default cap on events per sequence, enforced when a dataset is assembled.
pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Event {
    pub time: f64,
    pub mark: usize,
}

impl Event {
    pub fn new(time: f64, mark: usize) -> Self {
        Self { time, mark }
    }
}

/// A non-empty list of events with strictly increasing times, observed up
/// to `horizon`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSequence {
    id: String,
    events: Vec<Event>,
    horizon: f64,
}

impl EventSequence {
    pub fn new(id: impl Into<String>, events: Vec<Event>, horizon: f64) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| CoreError::InvalidSequence {
            id: id.clone(),
            reason,
        };
        if events.is_empty() {
            return Err(invalid("no events".into()));
        }
        let mut prev = None;
        for (i, e) in events.iter().enumerate() {
            if !e.time.is_finite() || e.time < 0.0 {
                return Err(invalid(format!("event {i} has time {}", e.time)));
            }
            if let Some(p) = prev {
                if e.time <= p {
                    return Err(invalid(format!(
                        "event {i} at {} does not follow {p}",
                        e.time
                    )));
                }
            }
            prev = Some(e.time);
        }
        let last = events[events.len() - 1].time;
        if !horizon.is_finite() || horizon <= last {
            return Err(invalid(format!(
                "horizon {horizon} must exceed the last event time {last}"
            )));
        }
        Ok(Self {
            id,
            events,
            horizon,
        })
    }

    /// Builds a sequence from parallel time and mark lists.
    pub fn from_parts(
        id: impl Into<String>,
        times: &[f64],
        marks: &[usize],
        horizon: f64,
    ) -> Result<Self> {
        let id = id.into();
        if times.len() != marks.len() {
            return Err(CoreError::InvalidSequence {
                id,
                reason: format!("{} times but {} marks", times.len(), marks.len()),
            });
        }
        let events = times
            .iter()
            .zip(marks)
            .map(|(&t, &m)| Event::new(t, m))
            .collect();
        Self::new(id, events, horizon)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Always false: sequences hold at least one event.
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn marks(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.mark).collect()
    }

    /// Inter-arrival gaps, with the first measured from time zero.
    pub fn inter_arrivals(&self) -> Vec<f64> {
        let mut prev = 0.0;
        self.events
            .iter()
            .map(|e| {
                let gap = e.time - prev;
                prev = e.time;
                gap
            })
            .collect()
    }

    pub fn max_mark(&self) -> usize {
        self.events.iter().map(|e| e.mark).max().unwrap_or(0)
    }

    pub fn with_id(&self, id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..self.clone()
        }
    }
}

/// Positive and negative corpus ids for one query.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryLabels {
    pub positives: BTreeSet<String>,
    pub negatives: BTreeSet<String>,
}

/// Per-query relevance labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelevanceLabels {
    by_query: BTreeMap<String, QueryLabels>,
}

impl RelevanceLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, labels: QueryLabels) -> Result<()> {
        let query = query.into();
        if let Some(shared) = labels.positives.intersection(&labels.negatives).next() {
            return Err(CoreError::Labeling(format!(
                "query {query}: corpus id {shared} is both positive and negative"
            )));
        }
        self.by_query.insert(query, labels);
        Ok(())
    }

    pub fn get(&self, query: &str) -> Option<&QueryLabels> {
        self.by_query.get(query)
    }

    pub fn positives(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.by_query.get(query).map(|l| &l.positives)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &QueryLabels)> {
        self.by_query.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.by_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_query.is_empty()
    }
}

/// Corpus, queries and labels sharing one mark vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub corpus: BTreeMap<String, EventSequence>,
    pub queries: BTreeMap<String, EventSequence>,
    pub labels: RelevanceLabels,
    pub mark_vocab_size: usize,
}

impl Dataset {
    /// Assembles a dataset, rejecting marks outside the vocabulary, sequences
    /// longer than `max_len`, and labels that reference unknown ids.
    pub fn new(
        corpus: Vec<EventSequence>,
        queries: Vec<EventSequence>,
        labels: RelevanceLabels,
        mark_vocab_size: usize,
        max_len: usize,
    ) -> Result<Self> {
        if mark_vocab_size == 0 {
            return Err(CoreError::Config(
                "mark vocabulary must be non-empty".into(),
            ));
        }
        let check = |seq: &EventSequence| -> Result<()> {
            if seq.max_mark() >= mark_vocab_size {
                return Err(CoreError::InvalidSequence {
                    id: seq.id().to_string(),
                    reason: format!(
                        "mark {} outside vocabulary of size {mark_vocab_size}",
                        seq.max_mark()
                    ),
                });
            }
            if seq.len() > max_len {
                return Err(CoreError::Capacity {
                    len: seq.len(),
                    cap: max_len,
                });
            }
            Ok(())
        };
        let mut corpus_map = BTreeMap::new();
        for seq in corpus {
            check(&seq)?;
            if corpus_map.insert(seq.id().to_string(), seq).is_some() {
                return Err(CoreError::Input("duplicate corpus id".into()));
            }
        }
        let mut query_map = BTreeMap::new();
        for seq in queries {
            check(&seq)?;
            if query_map.insert(seq.id().to_string(), seq).is_some() {
                return Err(CoreError::Input("duplicate query id".into()));
            }
        }
        for (q, l) in labels.iter() {
            if !query_map.contains_key(q) {
                return Err(CoreError::Labeling(format!("labels for unknown query {q}")));
            }
            if let Some(c) = l
                .positives
                .iter()
                .chain(&l.negatives)
                .find(|c| !corpus_map.contains_key(*c))
            {
                return Err(CoreError::Labeling(format!(
                    "query {q} references unknown corpus id {c}"
                )));
            }
        }
        Ok(Self {
            corpus: corpus_map,
            queries: query_map,
            labels,
            mark_vocab_size,
        })
    }

    /// Latest horizon over every corpus and query sequence.
    pub fn global_horizon(&self) -> f64 {
        self.corpus
            .values()
            .chain(self.queries.values())
            .map(EventSequence::horizon)
            .fold(0.0, f64::max)
    }

    pub fn corpus_ids(&self) -> Vec<String> {
        self.corpus.keys().cloned().collect()
    }

    pub fn query_ids(&self) -> Vec<String> {
        self.queries.keys().cloned().collect()
    }

    /// Mean of `|C_q+| / |C|` over labeled queries.
    pub fn positive_ratio(&self) -> f64 {
        if self.labels.is_empty() || self.corpus.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .labels
            .iter()
            .map(|(_, l)| l.positives.len() as f64 / self.corpus.len() as f64)
            .sum();
        total / self.labels.len() as f64
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_sequences(&dir.join("corpus.jsonl"), self.corpus.values())?;
        write_sequences(&dir.join("queries.jsonl"), self.queries.values())?;
        write_labels(&dir.join("labels.jsonl"), &self.labels)?;
        let meta = DatasetMeta {
            mark_vocab_size: self.mark_vocab_size,
        };
        let path = dir.join("dataset.json");
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&meta).expect("meta serializes"),
        )
        .map_err(io_err(&path))?;
        Ok(())
    }

    pub fn load_dir(dir: &Path, max_len: usize) -> Result<Self> {
        let path = dir.join("dataset.json");
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|source| CoreError::Json {
            context: path.display().to_string(),
            source,
        })?;
        let corpus = read_sequences(&dir.join("corpus.jsonl"))?;
        let queries = read_sequences(&dir.join("queries.jsonl"))?;
        let labels = read_labels(&dir.join("labels.jsonl"))?;
        Self::new(corpus, queries, labels, meta.mark_vocab_size, max_len)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    mark_vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceRecord {
    id: String,
    horizon: f64,
    events: Vec<(f64, usize)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    query: String,
    positives: Vec<String>,
    negatives: Vec<String>,
}

pub fn sequence_to_json(seq: &EventSequence) -> String {
    let record = SequenceRecord {
        id: seq.id.clone(),
        horizon: seq.horizon,
        events: seq.events.iter().map(|e| (e.time, e.mark)).collect(),
    };
    serde_json::to_string(&record).expect("sequence serializes")
}

pub fn sequence_from_json(line: &str) -> Result<EventSequence> {
    let record: SequenceRecord = serde_json::from_str(line).map_err(|source| CoreError::Json {
        context: "sequence record".into(),
        source,
    })?;
    let events = record
        .events
        .into_iter()
        .map(|(t, m)| Event::new(t, m))
        .collect();
    EventSequence::new(record.id, events, record.horizon)
}

pub fn write_sequences<'a>(
    path: &Path,
    seqs: impl IntoIterator<Item = &'a EventSequence>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for seq in seqs {
        writeln!(out, "{}", sequence_to_json(seq)).map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_sequences(path: &Path) -> Result<Vec<EventSequence>> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut seqs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        seqs.push(sequence_from_json(&line)?);
    }
    Ok(seqs)
}

pub fn write_labels(path: &Path, labels: &RelevanceLabels) -> Result<()> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for (query, l) in labels.iter() {
        let record = LabelRecord {
            query: query.to_string(),
            positives: l.positives.iter().cloned().collect(),
            negatives: l.negatives.iter().cloned().collect(),
        };
        let line = serde_json::to_string(&record).expect("labels serialize");
        writeln!(out, "{line}").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_labels(path: &Path) -> Result<RelevanceLabels> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut labels = RelevanceLabels::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LabelRecord =
            serde_json::from_str(&line).map_err(|source| CoreError::Json {
                context: path.display().to_string(),
                source,
            })?;
        labels.insert(
            record.query,
            QueryLabels {
                positives: record.positives.into_iter().collect(),
                negatives: record.negatives.into_iter().collect(),
            },
        )?;
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_increasing_times() {
        let err = EventSequence::from_parts("s", &[1.0, 1.0], &[0, 0], 2.0).unwrap_err();
        assert!(matches!(err, CoreError::InvalidSequence { .. }));
        assert!(EventSequence::from_parts("s", &[2.0, 1.0], &[0, 0], 3.0).is_err());
    }

    #[test]
    fn rejects_empty_and_bad_horizon() {
        assert!(EventSequence::new("s", vec![], 1.0).is_err());
        assert!(EventSequence::from_parts("s", &[1.0], &[0], 1.0).is_err());
        assert!(EventSequence::from_parts("s", &[-0.5], &[0], 1.0).is_err());
        assert!(EventSequence::from_parts("s", &[f64::NAN], &[0], 1.0).is_err());
    }

    #[test]
    fn inter_arrivals_start_from_zero() {
        let s = EventSequence::from_parts("s", &[0.5, 1.0, 2.5], &[0, 1, 0], 3.0).unwrap();
        assert_eq!(s.inter_arrivals(), vec![0.5, 0.5, 1.5]);
    }

    #[test]
    fn dataset_enforces_vocab_and_cap() {
        let s = EventSequence::from_parts("c", &[1.0, 2.0], &[0, 3], 3.0).unwrap();
        let err = Dataset::new(vec![s.clone()], vec![], RelevanceLabels::new(), 3, 10).unwrap_err();
        assert!(matches!(err, CoreError::InvalidSequence { .. }));
        let err = Dataset::new(vec![s], vec![], RelevanceLabels::new(), 4, 1).unwrap_err();
        assert!(matches!(err, CoreError::Capacity { len: 2, cap: 1 }));
    }

    #[test]
    fn labels_must_be_disjoint() {
        let mut labels = RelevanceLabels::new();
        let l = QueryLabels {
            positives: ["a".to_string()].into(),
            negatives: ["a".to_string()].into(),
        };
        assert!(labels.insert("q", l).is_err());
    }

    #[test]
    fn sequence_json_is_lossless() {
        let s =
            EventSequence::from_parts("x", &[0.1, 1.0 / 3.0, 2.718281828459045], &[2, 0, 1], 3.5)
                .unwrap();
        let line = sequence_to_json(&s);
        assert!(line.starts_with("{\"id\":\"x\",\"horizon\":3.5,\"events\":[[0.1,2],"));
        assert_eq!(sequence_from_json(&line).unwrap(), s);
    }
}

//! Labelled opinion documents and fixed-proportion collection sampling.
//!
//! Corpus files are line-delimited JSON, one `{id, text, value_label, topic}`
//! record per line. Collections are drawn from a single topic's pool so every
//! collection summarises opinions about the same subject.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("value scheme `{0}` is invalid: {1}")]
    InvalidScheme(String, String),
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record on line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown value label `{label}` on line {line}")]
    UnknownValueLabel { line: usize, label: String },
    #[error("duplicate document id `{id}` on line {line}")]
    DuplicateId { line: usize, id: String },
    #[error("fractions sum to {0}, expected 1")]
    FractionsNotNormalized(f64),
    #[error("invalid fraction for `{label}`: {value}")]
    InvalidFraction { label: String, value: f64 },
    #[error("collection size {size} is smaller than the number of values ({values})")]
    SizeTooSmall { size: usize, values: usize },
    #[error("proportion does not match the scheme: {0}")]
    ProportionMismatch(String),
    #[error("insufficient pool for `{label}`: need {needed}, largest topic pool has {available}")]
    InsufficientPool {
        label: String,
        needed: usize,
        available: usize,
    },
}

/// One opinion class in a [`ValueScheme`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueDef {
    pub label: String,
    pub descriptor: String,
}

/// Singular/plural noun used for the documents in prompt text ("review"/"reviews").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentNoun {
    pub singular: String,
    pub plural: String,
}

impl Default for DocumentNoun {
    fn default() -> Self {
        Self {
            singular: "review".into(),
            plural: "reviews".into(),
        }
    }
}

/// Ordered set of value labels. All distributions index against this order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValueScheme {
    pub name: String,
    pub values: Vec<ValueDef>,
    #[serde(default)]
    pub noun: DocumentNoun,
}

impl ValueScheme {
    pub fn new(
        name: impl Into<String>,
        values: Vec<ValueDef>,
        noun: DocumentNoun,
    ) -> Result<Self, CorpusError> {
        let scheme = Self {
            name: name.into(),
            values,
            noun,
        };
        scheme.validate()?;
        Ok(scheme)
    }

    /// Two-value sentiment scheme over product reviews.
    pub fn sentiment() -> Self {
        Self {
            name: "sentiment".into(),
            values: vec![
                ValueDef {
                    label: "positive".into(),
                    descriptor: "The text expresses a positive opinion.".into(),
                },
                ValueDef {
                    label: "negative".into(),
                    descriptor: "The text expresses a negative opinion.".into(),
                },
            ],
            noun: DocumentNoun::default(),
        }
    }

    /// Two-value political stance scheme over tweets.
    pub fn political() -> Self {
        Self {
            name: "political".into(),
            values: vec![
                ValueDef {
                    label: "pro-republican".into(),
                    descriptor: "The text supports the Republican party.".into(),
                },
                ValueDef {
                    label: "pro-democrat".into(),
                    descriptor: "The text supports the Democratic party.".into(),
                },
            ],
            noun: DocumentNoun {
                singular: "tweet".into(),
                plural: "tweets".into(),
            },
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |why: &str| Err(CorpusError::InvalidScheme(self.name.clone(), why.into()));
        if self.values.len() < 2 {
            return bad("at least 2 values are required");
        }
        let mut seen = HashSet::new();
        for v in &self.values {
            if v.label.trim().is_empty() {
                return bad("empty value label");
            }
            if !seen.insert(v.label.as_str()) {
                return bad(&format!("duplicate label `{}`", v.label));
            }
            if v.descriptor.trim().is_empty() {
                return bad(&format!("empty descriptor for `{}`", v.label));
            }
        }
        if self.noun.singular.trim().is_empty() || self.noun.plural.trim().is_empty() {
            return bad("document noun must be non-empty");
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.values.iter().map(|v| v.label.as_str())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.values.iter().position(|v| v.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub value_label: String,
    pub topic: String,
    pub word_count: usize,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Inclusive word-count bounds applied at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthFilter {
    pub min_words: usize,
    pub max_words: usize,
}

impl LengthFilter {
    pub const REVIEWS: LengthFilter = LengthFilter {
        min_words: 30,
        max_words: 120,
    };

    pub fn unbounded() -> Self {
        Self {
            min_words: 0,
            max_words: usize::MAX,
        }
    }

    pub fn accepts(&self, words: usize) -> bool {
        (self.min_words..=self.max_words).contains(&words)
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: String,
    text: String,
    value_label: String,
    topic: String,
}

/// Reads a line-delimited JSON corpus, keeping documents whose word count
/// passes `filter`. Blank lines are skipped; input order is preserved.
pub fn ingest(
    path: &Path,
    scheme: &ValueScheme,
    filter: LengthFilter,
) -> Result<Vec<Document>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ingest_reader(BufReader::new(file), scheme, filter).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn ingest_reader<R: BufRead>(
    reader: R,
    scheme: &ValueScheme,
    filter: LengthFilter,
) -> Result<Vec<Document>, CorpusError> {
    let mut ids = HashSet::new();
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if rec.text.trim().is_empty() {
            return Err(CorpusError::MalformedRecord {
                line: line_no,
                reason: "empty text".into(),
            });
        }
        if scheme.index_of(&rec.value_label).is_none() {
            return Err(CorpusError::UnknownValueLabel {
                line: line_no,
                label: rec.value_label,
            });
        }
        if !ids.insert(rec.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: rec.id,
            });
        }
        let words = word_count(&rec.text);
        if !filter.accepts(words) {
            continue;
        }
        docs.push(Document {
            id: rec.id,
            text: rec.text,
            value_label: rec.value_label,
            topic: rec.topic,
            word_count: words,
        });
    }
    Ok(docs)
}

/// Exact per-label document counts for one collection, in scheme order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProportionSpec {
    pub counts: IndexMap<String, usize>,
}

impl ProportionSpec {
    pub fn size(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, label: &str) -> usize {
        self.counts.get(label).copied().unwrap_or(0)
    }

    /// Counts aligned to scheme order; labels absent from the proportion count as 0.
    pub fn aligned(&self, scheme: &ValueScheme) -> Vec<usize> {
        scheme.labels().map(|l| self.count(l)).collect()
    }

    pub fn check_against(&self, scheme: &ValueScheme) -> Result<(), CorpusError> {
        for label in self.counts.keys() {
            if scheme.index_of(label).is_none() {
                return Err(CorpusError::ProportionMismatch(format!(
                    "label `{label}` is not in scheme `{}`",
                    scheme.name
                )));
            }
        }
        Ok(())
    }
}

/// Converts target fractions into integer counts summing to `size` by the
/// largest-remainder method. Equal remainders go to the earlier scheme value.
pub fn make_proportion(
    scheme: &ValueScheme,
    size: usize,
    fractions: &BTreeMap<String, f64>,
) -> Result<ProportionSpec, CorpusError> {
    const TOL: f64 = 1e-9;
    for (label, &value) in fractions {
        if scheme.index_of(label).is_none() {
            return Err(CorpusError::ProportionMismatch(format!(
                "label `{label}` is not in scheme `{}`",
                scheme.name
            )));
        }
        if !value.is_finite() || value < 0.0 {
            return Err(CorpusError::InvalidFraction {
                label: label.clone(),
                value,
            });
        }
    }
    let total: f64 = fractions.values().sum();
    if (total - 1.0).abs() > TOL {
        return Err(CorpusError::FractionsNotNormalized(total));
    }
    if size < scheme.len() {
        return Err(CorpusError::SizeTooSmall {
            size,
            values: scheme.len(),
        });
    }

    let quotas: Vec<f64> = scheme
        .labels()
        .map(|l| fractions.get(l).copied().unwrap_or(0.0) * size as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + TOL).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let leftover = size.saturating_sub(assigned);

    let mut order: Vec<usize> = (0..quotas.len()).collect();
    let remainder = |i: usize| (quotas[i] - counts[i] as f64).max(0.0);
    // stable sort keeps scheme order among (near-)equal remainders
    order.sort_by(|&a, &b| {
        let (ra, rb) = (remainder(a), remainder(b));
        if (ra - rb).abs() <= TOL {
            std::cmp::Ordering::Equal
        } else {
            rb.partial_cmp(&ra).unwrap()
        }
    });
    for &i in order.iter().cycle().take(leftover) {
        counts[i] += 1;
    }

    Ok(ProportionSpec {
        counts: scheme.labels().map(str::to_string).zip(counts).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Balanced,
    SkewV1,
    SkewV2,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Balanced, Regime::SkewV1, Regime::SkewV2];

    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Balanced => "balanced",
            Regime::SkewV1 => "skew_v1",
            Regime::SkewV2 => "skew_v2",
        }
    }

    /// Default target fractions: uniform, or 75% on the first (second) value
    /// with the remaining 25% spread evenly over the other values.
    pub fn default_fractions(&self, scheme: &ValueScheme) -> BTreeMap<String, f64> {
        let k = scheme.len();
        let favoured = match self {
            Regime::Balanced => None,
            Regime::SkewV1 => Some(0),
            Regime::SkewV2 => Some(1),
        };
        scheme
            .labels()
            .enumerate()
            .map(|(i, l)| {
                let f = match favoured {
                    None => 1.0 / k as f64,
                    Some(j) if j == i => 0.75,
                    Some(_) => 0.25 / (k - 1) as f64,
                };
                (l.to_string(), f)
            })
            .collect()
    }

    /// Default counts for `size` documents.
    ///
    /// `SkewV2` mirrors `SkewV1` by swapping the first two counts, so a
    /// half-document remainder always goes to the favoured value (30 documents
    /// give 23/7 and 7/23) instead of to whichever value comes first.
    pub fn proportion(
        &self,
        scheme: &ValueScheme,
        size: usize,
    ) -> Result<ProportionSpec, CorpusError> {
        if *self != Regime::SkewV2 {
            return make_proportion(scheme, size, &self.default_fractions(scheme));
        }
        let mut spec = Regime::SkewV1.proportion(scheme, size)?;
        let (first, second) = (spec.counts[0], spec.counts[1]);
        spec.counts[0] = second;
        spec.counts[1] = first;
        Ok(spec)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown regime `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    pub id: String,
    pub scheme: ValueScheme,
    pub topic: String,
    pub documents: Vec<Document>,
    pub proportion: ProportionSpec,
    pub regime_tag: Regime,
}

impl Collection {
    pub fn size(&self) -> usize {
        self.documents.len()
    }

    /// Per-label document counts in scheme order.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.scheme.len()];
        for d in &self.documents {
            if let Some(i) = self.scheme.index_of(&d.value_label) {
                counts[i] += 1;
            }
        }
        counts
    }
}

/// Draws `n_collections` collections that match `spec` exactly.
///
/// Each collection picks one topic (uniformly among topics able to satisfy
/// `spec`), samples documents per label without replacement, then shuffles.
/// Documents may recur across collections. The result depends only on the
/// inputs and `seed`.
pub fn sample_collections(
    docs: &[Document],
    scheme: &ValueScheme,
    spec: &ProportionSpec,
    regime: Regime,
    n_collections: usize,
    seed: u64,
) -> Result<Vec<Collection>, CorpusError> {
    spec.check_against(scheme)?;
    let needed = spec.aligned(scheme);

    // topic -> per-label pools, in first-seen order for determinism
    let mut pools: IndexMap<&str, Vec<Vec<&Document>>> = IndexMap::new();
    for d in docs {
        let Some(i) = scheme.index_of(&d.value_label) else {
            continue;
        };
        pools
            .entry(d.topic.as_str())
            .or_insert_with(|| vec![Vec::new(); scheme.len()])[i]
            .push(d);
    }

    let eligible: Vec<(&str, &Vec<Vec<&Document>>)> = pools
        .iter()
        .filter(|(_, per_label)| per_label.iter().zip(&needed).all(|(p, &n)| p.len() >= n))
        .map(|(t, p)| (*t, p))
        .collect();

    if eligible.is_empty() && n_collections > 0 {
        // report the first label no topic can satisfy
        for (i, &n) in needed.iter().enumerate() {
            let available = pools.values().map(|p| p[i].len()).max().unwrap_or(0);
            if available < n {
                return Err(CorpusError::InsufficientPool {
                    label: scheme.values[i].label.clone(),
                    needed: n,
                    available,
                });
            }
        }
        return Err(CorpusError::InsufficientPool {
            label: scheme.values[0].label.clone(),
            needed: needed[0],
            available: 0,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_collections);
    for k in 0..n_collections {
        let (topic, per_label) = eligible.choose(&mut rng).expect("eligible is non-empty");
        let mut chosen: Vec<Document> = Vec::with_capacity(spec.size());
        for (pool, &n) in per_label.iter().zip(&needed) {
            chosen.extend(pool.choose_multiple(&mut rng, n).map(|d| (*d).clone()));
        }
        chosen.shuffle(&mut rng);
        out.push(Collection {
            id: format!("{}-{:04}", regime.as_str(), k),
            scheme: scheme.clone(),
            topic: topic.to_string(),
            documents: chosen,
            proportion: spec.clone(),
            regime_tag: regime,
        });
    }
    Ok(out)
}

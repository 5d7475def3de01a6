use std::collections::HashSet;
use std::fs;
use std::path::Path;

use super::{classified, ClassifiedProposition, Classifier, ValuationError};
use crate::corpus::ValueScheme;

const BUILTIN_POSITIVE: &str = include_str!("../../lexicons/positive.txt");
const BUILTIN_NEGATIVE: &str = include_str!("../../lexicons/negative.txt");

/// Lowercased word tokens; hyphens and apostrophes stay inside words.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|t| t.trim_matches(|c| c == '-' || c == '\'').to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

fn parse_word_list(text: &str) -> impl Iterator<Item = String> + '_ {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_lowercase)
}

/// Word lists per value. Each value's own label always counts as a cue for it.
#[derive(Debug, Clone)]
pub struct Lexicon {
    scheme: ValueScheme,
    words: Vec<HashSet<String>>,
}

impl Lexicon {
    fn seeded(scheme: &ValueScheme) -> Self {
        let words = scheme
            .labels()
            .map(|l| HashSet::from([l.to_lowercase()]))
            .collect();
        Self {
            scheme: scheme.clone(),
            words,
        }
    }

    /// Bundled lists for the sentiment scheme; labels only for anything else.
    pub fn builtin(scheme: &ValueScheme) -> Self {
        let mut lex = Self::seeded(scheme);
        for (label, list) in [
            ("positive", BUILTIN_POSITIVE),
            ("negative", BUILTIN_NEGATIVE),
        ] {
            if let Some(i) = scheme.index_of(label) {
                lex.words[i].extend(parse_word_list(list));
            }
        }
        lex
    }

    /// Reads `<dir>/<label>.txt` for every value; a missing file is an error.
    pub fn from_dir(dir: &Path, scheme: &ValueScheme) -> Result<Self, ValuationError> {
        let mut lex = Self::seeded(scheme);
        for (i, label) in scheme.labels().enumerate() {
            let path = dir.join(format!("{label}.txt"));
            let text = fs::read_to_string(&path)
                .map_err(|e| ValuationError::Lexicon(format!("{}: {e}", path.display())))?;
            lex.words[i].extend(parse_word_list(&text));
        }
        Ok(lex)
    }

    pub fn scheme(&self) -> &ValueScheme {
        &self.scheme
    }

    /// Cue hits per value, in scheme order.
    pub fn hits(&self, text: &str) -> Vec<usize> {
        let tokens = tokenize(text);
        self.words
            .iter()
            .map(|set| tokens.iter().filter(|t| set.contains(*t)).count())
            .collect()
    }
}

impl Classifier for Lexicon {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn classify(
        &self,
        propositions: &[String],
        scheme: &ValueScheme,
    ) -> Result<Vec<ClassifiedProposition>, ValuationError> {
        if scheme.labels().ne(self.scheme.labels()) {
            return Err(ValuationError::SchemeMismatch);
        }
        let k = scheme.len();
        Ok(propositions
            .iter()
            .map(|p| {
                let hits = self.hits(p);
                let total: usize = hits.iter().sum();
                if total == 0 {
                    classified(p, scheme, vec![1.0 / k as f64; k], false, true)
                } else {
                    let scores = hits.iter().map(|&h| h as f64 / total as f64).collect();
                    classified(p, scheme, scores, false, false)
                }
            })
            .collect())
    }
}

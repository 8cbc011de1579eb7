//! Source/target pair corpora, the synthetic one-to-many generator, and
//! cluster purity against known pattern labels.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Corpus tokenizer: lowercase and split on whitespace.
pub fn corpus_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token ↔ id map. Ids 0..4 are the reserved pad/bos/eos/unk tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut vocab = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for tok in RESERVED {
            vocab.insert(tok);
        }
        vocab
    }
}

impl Vocabulary {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::InvalidInput(
                "vocabulary must start with the reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_owned());
        self.index.insert(token.to_owned(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Encodes text, mapping unknown tokens to `<unk>`. Returns the ids and
    /// the number of unknown tokens.
    pub fn encode_lossy(&self, text: &str) -> (Vec<u32>, usize) {
        let mut unknown = 0;
        let ids = corpus_tokens(text)
            .iter()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unknown += 1;
                    UNK
                })
            })
            .collect();
        (ids, unknown)
    }

    /// Joins ids with spaces, skipping pad/bos/eos.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK as usize]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A tokenized sentence together with its original text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    pub text: String,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>, text: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("token sequence must be non-empty".into()));
        }
        Ok(Self {
            tokens,
            text: text.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternPair {
    pub source: TokenSequence,
    pub target: TokenSequence,
    pub pattern: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatternCorpus {
    pub pairs: Vec<PatternPair>,
    pub vocab: Vocabulary,
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    source: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pattern: Option<usize>,
}

impl PatternCorpus {
    /// Builds a corpus from raw text triples. The vocabulary holds the reserved
    /// tokens followed by every observed token in order of first appearance.
    pub fn from_texts<I, S, T>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, T, Option<usize>)>,
        S: Into<String>,
        T: Into<String>,
    {
        let mut vocab = Vocabulary::default();
        let mut pairs = Vec::new();
        for (idx, (source, target, pattern)) in records.into_iter().enumerate() {
            let source = source.into();
            let target = target.into();
            let mut seq = |text: String, what: &str| -> Result<TokenSequence> {
                let ids: Vec<u32> = corpus_tokens(&text).iter().map(|t| vocab.insert(t)).collect();
                TokenSequence::new(ids, text)
                    .map_err(|_| Error::InvalidInput(format!("pair {idx}: empty {what}")))
            };
            let source = seq(source, "source")?;
            let target = seq(target, "target")?;
            pairs.push(PatternPair {
                source,
                target,
                pattern,
            });
        }
        Ok(Self { pairs, vocab })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of distinct labels, `max(label) + 1`, or `None` if unlabeled.
    pub fn pattern_count(&self) -> Option<usize> {
        self.pairs.iter().filter_map(|p| p.pattern).max().map(|m| m + 1)
    }

    pub fn max_source_len(&self) -> usize {
        self.pairs.iter().map(|p| p.source.len()).max().unwrap_or(0)
    }

    pub fn max_target_len(&self) -> usize {
        self.pairs.iter().map(|p| p.target.len()).max().unwrap_or(0)
    }

    /// Groups pairs by source text in order of first appearance.
    pub fn grouped_by_source(&self) -> Vec<(&TokenSequence, Vec<&PatternPair>)> {
        let mut order: Vec<(&TokenSequence, Vec<&PatternPair>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for pair in &self.pairs {
            match slot.get(pair.source.text.as_str()) {
                Some(&i) => order[i].1.push(pair),
                None => {
                    slot.insert(&pair.source.text, order.len());
                    order.push((&pair.source, vec![pair]));
                }
            }
        }
        order
    }
}

pub fn save_corpus(corpus: &PatternCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for pair in &corpus.pairs {
        let record = CorpusRecord {
            source: pair.source.text.clone(),
            target: pair.target.text.clone(),
            pattern: pair.pattern,
        };
        let line = serde_json::to_string(&record).expect("corpus records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<PatternCorpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: idx + 1,
            message,
        };
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if corpus_tokens(&rec.source).is_empty() || corpus_tokens(&rec.target).is_empty() {
            return Err(parse_err("source and target must contain tokens".into()));
        }
        records.push((rec.source, rec.target, rec.pattern));
    }
    if records.is_empty() {
        return Err(Error::EmptyCorpus(path.to_owned()));
    }
    PatternCorpus::from_texts(records)
}

/// Built-in lexicon for synthetic sentences, each word paired with its synonym.
pub const LEXICON: [(&str, &str); 16] = [
    ("cat", "feline"),
    ("dog", "hound"),
    ("bird", "fowl"),
    ("fish", "trout"),
    ("red", "crimson"),
    ("blue", "azure"),
    ("big", "large"),
    ("small", "tiny"),
    ("runs", "sprints"),
    ("jumps", "leaps"),
    ("sees", "spots"),
    ("eats", "devours"),
    ("fast", "quick"),
    ("slow", "sluggish"),
    ("happy", "glad"),
    ("old", "aged"),
];

fn synonym(word: &str) -> String {
    LEXICON
        .iter()
        .find(|(w, _)| *w == word)
        .map(|(_, s)| (*s).to_owned())
        .unwrap_or_else(|| format!("{word}_syn"))
}

/// A deterministic source → target transformation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternRule {
    /// Insert a fixed token in front of the source.
    Prefix(String),
    Reversal,
    /// Repeat every token twice.
    Duplication,
    /// Replace every word by its synonym from [`LEXICON`] (`<w>_syn` when absent).
    Synonym,
}

impl PatternRule {
    pub fn apply(&self, words: &[String]) -> Vec<String> {
        match self {
            PatternRule::Prefix(tok) => std::iter::once(tok.clone()).chain(words.iter().cloned()).collect(),
            PatternRule::Reversal => words.iter().rev().cloned().collect(),
            PatternRule::Duplication => words.iter().flat_map(|w| [w.clone(), w.clone()]).collect(),
            PatternRule::Synonym => words.iter().map(|w| synonym(w)).collect(),
        }
    }

    /// The first `k` rules of the default catalogue.
    pub fn defaults(k: usize) -> Vec<PatternRule> {
        let catalogue = [
            PatternRule::Synonym,
            PatternRule::Prefix("so".into()),
            PatternRule::Reversal,
            PatternRule::Duplication,
        ];
        catalogue.into_iter().take(k).collect()
    }
}

impl std::fmt::Display for PatternRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PatternRule::Prefix(tok) => write!(f, "prefix({tok})"),
            PatternRule::Reversal => write!(f, "reversal"),
            PatternRule::Duplication => write!(f, "duplication"),
            PatternRule::Synonym => write!(f, "synonym"),
        }
    }
}

/// Parameters of a synthetic one-to-many corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rules: Vec<PatternRule>,
    pub n_sources: usize,
    pub seed: u64,
    pub lexicon: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
}

impl SyntheticSpec {
    pub fn new(k_true: usize, n_sources: usize, seed: u64) -> Self {
        Self {
            rules: PatternRule::defaults(k_true),
            n_sources,
            seed,
            lexicon: LEXICON.iter().map(|(w, _)| (*w).to_owned()).collect(),
            min_len: 3,
            max_len: 6,
        }
    }

    pub fn k_true(&self) -> usize {
        self.rules.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rules.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 pattern rules, got {}",
                self.rules.len()
            )));
        }
        if self.lexicon.is_empty() {
            return Err(Error::InvalidSpec("lexicon is empty".into()));
        }
        if self.lexicon.iter().any(|w| w.is_empty() || w.split_whitespace().count() != 1 || w.to_lowercase() != *w) {
            return Err(Error::InvalidSpec("lexicon words must be single lowercase tokens".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidSpec(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        let probe: Vec<String> = self
            .lexicon
            .iter()
            .cycle()
            .take(self.max_len.max(2))
            .cloned()
            .collect();
        let outputs: Vec<Vec<String>> = self.rules.iter().map(|r| r.apply(&probe)).collect();
        for i in 0..outputs.len() {
            for j in i + 1..outputs.len() {
                if outputs[i] == outputs[j] {
                    return Err(Error::InvalidSpec(format!(
                        "rules {} and {} collide on probe sentence {:?}",
                        self.rules[i],
                        self.rules[j],
                        probe.join(" ")
                    )));
                }
            }
        }
        Ok(())
    }

    /// Samples `n_sources` distinct random sentences.
    pub fn sample_sources(&self) -> Result<Vec<Vec<String>>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = HashSet::new();
        let mut sources = Vec::with_capacity(self.n_sources);
        let max_attempts = 100 * self.n_sources.max(1);
        let mut attempts = 0;
        while sources.len() < self.n_sources {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::InvalidSpec(format!(
                    "could not sample {} distinct sentences from the lexicon",
                    self.n_sources
                )));
            }
            let len = rng.random_range(self.min_len..=self.max_len);
            let sentence: Vec<String> = (0..len)
                .map(|_| self.lexicon.choose(&mut rng).expect("lexicon is non-empty").clone())
                .collect();
            if seen.insert(sentence.clone()) {
                sources.push(sentence);
            }
        }
        Ok(sources)
    }
}

/// Applies every rule to every source, emitting source-major triples.
pub fn corpus_from_sources(rules: &[PatternRule], sources: &[Vec<String>]) -> Result<PatternCorpus> {
    let records = sources.iter().flat_map(|src| {
        rules
            .iter()
            .enumerate()
            .map(move |(k, rule)| (src.join(" "), rule.apply(src).join(" "), Some(k)))
    });
    PatternCorpus::from_texts(records)
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PatternCorpus> {
    let sources = spec.sample_sources()?;
    corpus_from_sources(&spec.rules, &sources)
}

/// Cluster purity of expert assignments `(sample index, expert)` against the
/// corpus labels: `Σ_experts max_label count / total`.
pub fn pattern_purity(assignments: &[(usize, usize)], corpus: &PatternCorpus) -> Result<f64> {
    if assignments.is_empty() {
        return Err(Error::EmptyInput("no assignments".into()));
    }
    let mut table: HashMap<usize, HashMap<usize, usize>> = HashMap::new();
    let mut covered = HashSet::new();
    for &(sample, expert) in assignments {
        let pair = corpus.pairs.get(sample).ok_or_else(|| {
            Error::InvalidInput(format!("sample index {sample} out of range"))
        })?;
        let label = pair.pattern.ok_or(Error::UnlabeledCorpus)?;
        covered.insert(sample);
        *table.entry(expert).or_default().entry(label).or_insert(0) += 1;
    }
    if let Some(missing) = corpus
        .pairs
        .iter()
        .enumerate()
        .find(|(i, p)| p.pattern.is_some() && !covered.contains(i))
    {
        return Err(Error::InvalidInput(format!(
            "labeled sample {} has no assignment",
            missing.0
        )));
    }
    let majority: usize = table.values().map(|labels| labels.values().max().copied().unwrap_or(0)).sum();
    Ok(majority as f64 / assignments.len() as f64)
}

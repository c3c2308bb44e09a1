//! Multilingual corpora: synthetic generation with ground-truth token roles,
//! JSONL ingestion and serialization.
//!
//! A synthetic corpus gives every language its own disjoint surface
//! vocabulary. Each language owns a set of filler tokens that carry no label
//! information, and every (language, label) pair owns a set of signal tokens
//! that indicate the label when they appear in that language.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rng;

pub type TokenId = u32;

/// Surface string of the reserved mask token.
pub const MASK_TOKEN: &str = "[MASK]";

/// Role of a token id in the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Unassigned,
    Mask,
    Filler(usize),
    Signal(usize, usize),
}

/// Token vocabulary with language and label dictionaries.
///
/// Serializes to the sidecar JSON: token list, mask index, language and
/// label names and (for synthetic corpora) filler/signal set memberships.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocab {
    tokens: Vec<String>,
    mask_id: TokenId,
    languages: Vec<String>,
    labels: Vec<String>,
    fillers: Vec<Vec<TokenId>>,
    signals: Vec<Vec<Vec<TokenId>>>,
    index: HashMap<String, TokenId>,
    roles: Vec<Role>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    mask_id: TokenId,
    languages: Vec<String>,
    labels: Vec<String>,
    #[serde(default)]
    fillers: Vec<Vec<TokenId>>,
    #[serde(default)]
    signals: Vec<Vec<Vec<TokenId>>>,
}

impl From<Vocab> for VocabFile {
    fn from(v: Vocab) -> Self {
        VocabFile {
            tokens: v.tokens,
            mask_id: v.mask_id,
            languages: v.languages,
            labels: v.labels,
            fillers: v.fillers,
            signals: v.signals,
        }
    }
}

impl TryFrom<VocabFile> for Vocab {
    type Error = Error;

    fn try_from(f: VocabFile) -> Result<Self> {
        Vocab::new(
            f.tokens,
            f.mask_id,
            f.languages,
            f.labels,
            f.fillers,
            f.signals,
        )
    }
}

impl Vocab {
    /// Builds a vocabulary and checks the set invariants: the mask belongs to
    /// no set, filler sets are disjoint across languages, signal sets are
    /// disjoint from each other and from the fillers, and every id is in
    /// range. `fillers`/`signals` may both be empty (ingested corpora).
    pub fn new(
        tokens: Vec<String>,
        mask_id: TokenId,
        languages: Vec<String>,
        labels: Vec<String>,
        fillers: Vec<Vec<TokenId>>,
        signals: Vec<Vec<Vec<TokenId>>>,
    ) -> Result<Self> {
        let size = tokens.len();
        if (mask_id as usize) >= size {
            return Err(Error::VocabMismatch(format!(
                "mask id {mask_id} out of range for {size} tokens"
            )));
        }
        let mut index = HashMap::with_capacity(size);
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::VocabMismatch(format!("duplicate token `{t}`")));
            }
        }
        if !fillers.is_empty() && fillers.len() != languages.len() {
            return Err(Error::VocabMismatch(
                "one filler set per language required".into(),
            ));
        }
        if !signals.is_empty()
            && (signals.len() != languages.len()
                || signals.iter().any(|row| row.len() != labels.len()))
        {
            return Err(Error::VocabMismatch(
                "one signal set per (language, label) required".into(),
            ));
        }

        let mut roles = vec![Role::Unassigned; size];
        roles[mask_id as usize] = Role::Mask;
        let mut claim = |id: TokenId, role: Role| -> Result<()> {
            let slot = roles.get_mut(id as usize).ok_or(Error::InvalidToken {
                token: id,
                vocab_size: size,
            })?;
            match *slot {
                Role::Unassigned => {
                    *slot = role;
                    Ok(())
                }
                Role::Mask => Err(Error::VocabMismatch(format!(
                    "mask token {id} listed in a filler or signal set"
                ))),
                _ => Err(Error::VocabMismatch(format!(
                    "token {id} belongs to more than one set"
                ))),
            }
        };
        for (l, set) in fillers.iter().enumerate() {
            for &id in set {
                claim(id, Role::Filler(l))?;
            }
        }
        for (l, row) in signals.iter().enumerate() {
            for (c, set) in row.iter().enumerate() {
                for &id in set {
                    claim(id, Role::Signal(l, c))?;
                }
            }
        }

        Ok(Vocab {
            tokens,
            mask_id,
            languages,
            labels,
            fillers,
            signals,
            index,
            roles,
        })
    }

    /// Number of token ids, mask included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn fillers(&self, language: usize) -> &[TokenId] {
        self.fillers.get(language).map_or(&[], Vec::as_slice)
    }

    pub fn signals(&self, language: usize, label: usize) -> &[TokenId] {
        self.signals
            .get(language)
            .and_then(|row| row.get(label))
            .map_or(&[], Vec::as_slice)
    }

    /// Whether filler/signal memberships are known (synthetic corpora).
    pub fn has_ground_truth(&self) -> bool {
        !self.fillers.is_empty() || !self.signals.is_empty()
    }

    /// Content hash identifying the token list and mask position.
    pub fn hash(&self) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&self.mask_id.to_le_bytes());
        for t in &self.tokens {
            bytes.extend_from_slice(&(t.len() as u64).to_le_bytes());
            bytes.extend_from_slice(t.as_bytes());
        }
        rng::sha256_hex(&bytes)[..16].to_string()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// One datapoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub language: usize,
    pub label: usize,
    pub tokens: Vec<TokenId>,
}

/// Parameters of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_languages: usize,
    pub n_classes: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Per-position probability of a token from the true (language, label)
    /// signal set.
    pub signal_rate: f64,
    /// Per-position probability of a token from a signal set of another
    /// label in the same language.
    pub noise_rate: f64,
    pub fillers_per_language: usize,
    pub signals_per_language_class: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_languages: 2,
            n_classes: 3,
            min_tokens: 8,
            max_tokens: 12,
            signal_rate: 0.2,
            noise_rate: 0.15,
            fillers_per_language: 200,
            signals_per_language_class: 10,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn filler_rate(&self) -> f64 {
        1.0 - self.signal_rate - self.noise_rate
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorpusSpec(m));
        if self.n_languages < 2 || self.n_classes < 2 {
            return bad(format!(
                "need at least 2 languages and 2 classes, got {} and {}",
                self.n_languages, self.n_classes
            ));
        }
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return bad(format!(
                "token range [{}, {}] is empty or starts at zero",
                self.min_tokens, self.max_tokens
            ));
        }
        if !(self.signal_rate > 0.0 && self.signal_rate <= 1.0) {
            return bad(format!("signal_rate {} not in (0, 1]", self.signal_rate));
        }
        if !(self.noise_rate >= 0.0 && self.noise_rate < 1.0) {
            return bad(format!("noise_rate {} not in [0, 1)", self.noise_rate));
        }
        if self.signal_rate + self.noise_rate > 1.0 + 1e-12 {
            return bad("signal_rate + noise_rate exceeds 1".into());
        }
        if self.signals_per_language_class == 0 {
            return bad("signal sets would be empty".into());
        }
        if self.filler_rate() > 1e-12 && self.fillers_per_language == 0 {
            return bad("filler sets would be empty".into());
        }
        Ok(())
    }
}

/// Builds the synthetic vocabulary for `spec`: per language, its fillers
/// followed by its signal sets in label order; the mask token is last.
pub fn synthetic_vocab(spec: &CorpusSpec) -> Result<Vocab> {
    spec.validate()?;
    let mut tokens = Vec::new();
    let mut fillers = Vec::with_capacity(spec.n_languages);
    let mut signals = Vec::with_capacity(spec.n_languages);
    for l in 0..spec.n_languages {
        let mut set = Vec::with_capacity(spec.fillers_per_language);
        for k in 0..spec.fillers_per_language {
            set.push(tokens.len() as TokenId);
            tokens.push(format!("lang{l}_f{k}"));
        }
        fillers.push(set);
        let mut row = Vec::with_capacity(spec.n_classes);
        for c in 0..spec.n_classes {
            let mut set = Vec::with_capacity(spec.signals_per_language_class);
            for k in 0..spec.signals_per_language_class {
                set.push(tokens.len() as TokenId);
                tokens.push(format!("lang{l}_c{c}_s{k}"));
            }
            row.push(set);
        }
        signals.push(row);
    }
    let mask_id = tokens.len() as TokenId;
    tokens.push(MASK_TOKEN.to_string());
    Vocab::new(
        tokens,
        mask_id,
        (0..spec.n_languages).map(|l| format!("lang{l}")).collect(),
        (0..spec.n_classes).map(|c| format!("label{c}")).collect(),
        fillers,
        signals,
    )
}

/// Generates a synthetic corpus with exactly `n_per_cell` examples for every
/// (language, label) cell.
///
/// Tokens are drawn independently per position: with probability
/// `signal_rate` from the true signal set, with probability `noise_rate`
/// from the signal set of a uniformly chosen other label of the same
/// language, otherwise from the language's filler set.
pub fn generate_corpus(spec: &CorpusSpec, n_per_cell: usize) -> Result<(Vocab, Vec<Example>)> {
    let vocab = synthetic_vocab(spec)?;
    let examples = generate_examples(&vocab, spec, n_per_cell, spec.seed, "")?;
    Ok((vocab, examples))
}

/// Draws examples over an existing synthetic vocabulary. Token rates and
/// lengths come from `spec`; set sizes come from `vocab`. Each cell uses its
/// own derived random stream. Ids are `{id_prefix}{language}:{label}:{k}`.
pub fn generate_examples(
    vocab: &Vocab,
    spec: &CorpusSpec,
    n_per_cell: usize,
    seed: u64,
    id_prefix: &str,
) -> Result<Vec<Example>> {
    spec.validate()?;
    if vocab.n_languages() != spec.n_languages || vocab.n_classes() != spec.n_classes {
        return Err(Error::VocabMismatch(
            "vocabulary shape differs from corpus spec".into(),
        ));
    }
    for l in 0..spec.n_languages {
        if spec.filler_rate() > 1e-12 && vocab.fillers(l).is_empty() {
            return Err(Error::CorpusSpec(format!("language {l} has no fillers")));
        }
        for c in 0..spec.n_classes {
            if vocab.signals(l, c).is_empty() {
                return Err(Error::CorpusSpec(format!(
                    "cell ({l}, {c}) has no signal tokens"
                )));
            }
        }
    }

    let n_classes = spec.n_classes;
    let mut out = Vec::with_capacity(n_per_cell * spec.n_languages * n_classes);
    for l in 0..spec.n_languages {
        for c in 0..n_classes {
            let mut rng = rng::stream(seed, &format!("corpus/cell={l},{c}"));
            for k in 0..n_per_cell {
                let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
                let tokens = (0..len)
                    .map(|_| {
                        let u: f64 = rng.random();
                        let set = if u < spec.signal_rate {
                            vocab.signals(l, c)
                        } else if u < spec.signal_rate + spec.noise_rate {
                            let mut other = rng.random_range(0..n_classes - 1);
                            if other >= c {
                                other += 1;
                            }
                            vocab.signals(l, other)
                        } else {
                            vocab.fillers(l)
                        };
                        set[rng.random_range(0..set.len())]
                    })
                    .collect();
                out.push(Example {
                    id: format!("{id_prefix}{l}:{c}:{k}"),
                    language: l,
                    label: c,
                    tokens,
                });
            }
        }
    }
    Ok(out)
}

/// Ground-truth role of a token relative to a (language, label) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    /// Signal token of the given label in the given language.
    SignalPos,
    /// Signal token of another label in the given language.
    SignalOther,
    /// Filler of the given language.
    Filler,
    /// Anything belonging to another language, or to no set at all.
    Foreign,
}

pub fn ground_truth_category(
    vocab: &Vocab,
    token: TokenId,
    language: usize,
    label: usize,
) -> TokenRole {
    match vocab.roles.get(token as usize) {
        Some(Role::Signal(l, c)) if *l == language => {
            if *c == label {
                TokenRole::SignalPos
            } else {
                TokenRole::SignalOther
            }
        }
        Some(Role::Filler(l)) if *l == language => TokenRole::Filler,
        _ => TokenRole::Foreign,
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    lang: &'a str,
    label: &'a str,
    tokens: Vec<&'a str>,
}

/// Writes examples as JSONL with surface strings for tokens, languages and
/// labels.
pub fn write_jsonl(path: &Path, vocab: &Vocab, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let name = |names: &'_ [String], i: usize| -> Result<String> {
            names
                .get(i)
                .cloned()
                .ok_or_else(|| Error::VocabMismatch(format!("example `{}`: id {i} unknown", ex.id)))
        };
        let lang = name(vocab.languages(), ex.language)?;
        let label = name(vocab.labels(), ex.label)?;
        let tokens = ex
            .tokens
            .iter()
            .map(|&t| {
                vocab.token(t).ok_or(Error::InvalidToken {
                    token: t,
                    vocab_size: vocab.len(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let rec = RecordOut {
            id: &ex.id,
            lang: &lang,
            label: &label,
            tokens,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct RawRecord {
    id: String,
    lang: String,
    label: String,
    tokens: Vec<String>,
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<RawRecord> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let value: Value = serde_json::from_str(line).map_err(|e| err(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| err("record is not a JSON object".into()))?;
    let string_field = |name: &str| -> Result<String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(err(format!("field `{name}` must be a string"))),
            None => Err(err(format!("missing field `{name}`"))),
        }
    };
    let id = string_field("id")?;
    let lang = string_field("lang")?;
    let label = match obj.get("label") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) if n.is_i64() || n.is_u64() => n.to_string(),
        Some(_) => return Err(err("field `label` must be a string or an integer".into())),
        None => return Err(err("missing field `label`".into())),
    };
    let tokens: Vec<String> = match (obj.get("tokens"), obj.get("text")) {
        (Some(Value::Array(items)), _) => items
            .iter()
            .map(|t| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| err("`tokens` must contain only strings".into()))
            })
            .collect::<Result<_>>()?,
        (Some(_), _) => return Err(err("field `tokens` must be an array".into())),
        (None, Some(Value::String(text))) => text.split_whitespace().map(str::to_string).collect(),
        (None, Some(_)) => return Err(err("field `text` must be a string".into())),
        (None, None) => return Err(err("record needs `tokens` or `text`".into())),
    };
    if tokens.is_empty() {
        return Err(err("record has no tokens".into()));
    }
    if tokens.iter().any(|t| t == MASK_TOKEN) {
        return Err(err(format!("reserved token `{MASK_TOKEN}` in input")));
    }
    Ok(RawRecord {
        id,
        lang,
        label,
        tokens,
    })
}

fn read_records(path: &Path) -> Result<Vec<(usize, RawRecord)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_record(path, i + 1, &line)?;
        if !seen.insert(rec.id.clone()) {
            return Err(Error::DuplicateId(rec.id));
        }
        out.push((i + 1, rec));
    }
    Ok(out)
}

fn intern(names: &mut Vec<String>, lookup: &mut HashMap<String, usize>, name: &str) -> usize {
    *lookup.entry(name.to_string()).or_insert_with(|| {
        names.push(name.to_string());
        names.len() - 1
    })
}

/// Loads a JSONL dataset, building a fresh vocabulary from the observed
/// tokens (first-seen order) plus a trailing mask token. Languages and
/// labels are mapped to dense ids in first-seen order.
pub fn load_jsonl(path: &Path) -> Result<(Vocab, Vec<Example>)> {
    let records = read_records(path)?;
    let mut tokens = Vec::new();
    let mut token_ids = HashMap::new();
    let mut languages = Vec::new();
    let mut language_ids = HashMap::new();
    let mut labels = Vec::new();
    let mut label_ids = HashMap::new();
    let mut examples = Vec::with_capacity(records.len());
    for (_, rec) in records {
        let ids = rec
            .tokens
            .iter()
            .map(|t| intern(&mut tokens, &mut token_ids, t) as TokenId)
            .collect();
        examples.push(Example {
            language: intern(&mut languages, &mut language_ids, &rec.lang),
            label: intern(&mut labels, &mut label_ids, &rec.label),
            id: rec.id,
            tokens: ids,
        });
    }
    let mask_id = tokens.len() as TokenId;
    tokens.push(MASK_TOKEN.to_string());
    let vocab = Vocab::new(tokens, mask_id, languages, labels, Vec::new(), Vec::new())?;
    Ok((vocab, examples))
}

/// Loads a JSONL dataset against an existing vocabulary. Unknown tokens,
/// languages or labels are errors at their line.
pub fn load_jsonl_with_vocab(path: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let records = read_records(path)?;
    let find = |names: &[String], name: &str| names.iter().position(|n| n == name);
    records
        .into_iter()
        .map(|(line, rec)| {
            let err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            };
            let language = find(vocab.languages(), &rec.lang)
                .ok_or_else(|| err(format!("unknown language `{}`", rec.lang)))?;
            let label = find(vocab.labels(), &rec.label)
                .ok_or_else(|| err(format!("unknown label `{}`", rec.label)))?;
            let tokens = rec
                .tokens
                .iter()
                .map(|t| {
                    vocab
                        .id_of(t)
                        .ok_or_else(|| err(format!("token `{t}` not in vocabulary")))
                })
                .collect::<Result<_>>()?;
            Ok(Example {
                id: rec.id,
                language,
                label,
                tokens,
            })
        })
        .collect()
}

/// Number of examples per (language, label) cell.
pub fn cell_counts(examples: &[Example], n_languages: usize, n_classes: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; n_classes]; n_languages];
    for ex in examples {
        counts[ex.language][ex.label] += 1;
    }
    counts
}

/// Length of the longest example.
pub fn max_len(examples: &[Example]) -> usize {
    examples.iter().map(|e| e.tokens.len()).max().unwrap_or(0)
}

//! Caption objects and semantic word matching.
//!
//! Objects are the maximal runs of contiguous nouns in a tagged caption,
//! minus runs that directly precede "of" (quantifiers such as "a glass of"
//! or "a group of"). Two object words match when they are equal, when their
//! embeddings are close enough, or when one is a (transitive) hypernym of
//! the other.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_COSINE_THRESHOLD: f64 = 0.55;

const BUNDLED_VECTORS: &str = include_str!("../data/vectors.txt");
const BUNDLED_HYPERNYMS: &str = include_str!("../data/hypernyms.tsv");
const BUNDLED_PLURALS: &str = include_str!("../data/plurals.tsv");

/// Coarse part-of-speech classes (Universal Dependencies names).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Verb,
    Aux,
    Adj,
    Adv,
    Det,
    Adp,
    Cconj,
    Sconj,
    Pron,
    Num,
    Punct,
    X,
}

impl PosTag {
    /// Parses UD tags and the common Penn Treebank tags.
    pub fn parse(tag: &str) -> Self {
        let t = tag.trim().to_ascii_uppercase();
        match t.as_str() {
            "NOUN" | "PROPN" | "NN" | "NNS" | "NNP" | "NNPS" => Self::Noun,
            "VERB" | "VB" | "VBD" | "VBG" | "VBN" | "VBP" | "VBZ" => Self::Verb,
            "AUX" | "MD" => Self::Aux,
            "ADJ" | "JJ" | "JJR" | "JJS" => Self::Adj,
            "ADV" | "RB" | "RBR" | "RBS" | "RP" => Self::Adv,
            "DET" | "DT" | "PDT" | "WDT" => Self::Det,
            "ADP" | "IN" | "TO" => Self::Adp,
            "CCONJ" | "CC" => Self::Cconj,
            "SCONJ" => Self::Sconj,
            "PRON" | "PRP" | "PRP$" | "WP" | "WP$" | "EX" => Self::Pron,
            "NUM" | "CD" => Self::Num,
            "PUNCT" | "." | "," | ":" => Self::Punct,
            _ => Self::X,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Noun => "NOUN",
            Self::Verb => "VERB",
            Self::Aux => "AUX",
            Self::Adj => "ADJ",
            Self::Adv => "ADV",
            Self::Det => "DET",
            Self::Adp => "ADP",
            Self::Cconj => "CCONJ",
            Self::Sconj => "SCONJ",
            Self::Pron => "PRON",
            Self::Num => "NUM",
            Self::Punct => "PUNCT",
            Self::X => "X",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub surface: String,
    pub pos: PosTag,
    pub lemma: String,
}

impl Token {
    pub fn new(surface: impl Into<String>, pos: PosTag, lemma: impl Into<String>) -> Self {
        Self {
            surface: surface.into(),
            pos,
            lemma: lemma.into(),
        }
    }
}

/// A caption together with its tagged tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub text: String,
    pub tokens: Vec<Token>,
}

impl Caption {
    /// Tokens must spell out the text once whitespace is ignored.
    pub fn new(text: impl Into<String>, tokens: Vec<Token>) -> Result<Self> {
        let text = text.into();
        let squash = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
        let joined: String = tokens.iter().map(|t| squash(&t.surface)).collect();
        if joined != squash(&text) {
            return Err(Error::InvalidInput(format!(
                "tokens {joined:?} do not cover caption {text:?}"
            )));
        }
        Ok(Self { text, tokens })
    }

    pub fn empty() -> Self {
        Self {
            text: String::new(),
            tokens: Vec::new(),
        }
    }
}

/// Splits text into word and punctuation tokens. Apostrophes and hyphens
/// inside a word stay attached.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ((ch == '\'' || ch == '-') && !cur.is_empty()) {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Singular words ending in "s" that suffix stripping must leave alone.
const S_EXCEPTIONS: &[&str] = &[
    "bus", "gas", "lens", "canvas", "cactus", "octopus", "campus", "virus", "bonus", "tennis",
    "series", "species", "news", "chess", "iris", "atlas", "bias", "pants", "jeans",
    "scissors", "this", "is", "was", "has", "his", "its", "us", "yes",
];

/// Lowercase, singular head forms.
///
/// Irregular plurals come from a TSV lexicon (`plural<TAB>singular`); the
/// rest is handled by suffix rules. Rules are applied until the form stops
/// changing, so `lemmatize` is idempotent.
#[derive(Debug, Clone)]
pub struct Lemmatizer {
    irregular: HashMap<String, String>,
    fixed: HashSet<String>,
}

impl Default for Lemmatizer {
    fn default() -> Self {
        Self::from_tsv(BUNDLED_PLURALS).expect("bundled plural lexicon parses")
    }
}

impl Lemmatizer {
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut irregular = HashMap::new();
        let mut fixed: HashSet<String> = S_EXCEPTIONS.iter().map(|s| s.to_string()).collect();
        for (n, line) in data_lines(text) {
            let mut cols = line.split('\t');
            let (Some(plural), Some(singular)) = (cols.next(), cols.next()) else {
                return Err(Error::Lexicon(format!("plural lexicon line {n}: expected two columns")));
            };
            let plural = plural.trim().to_lowercase();
            let singular = singular.trim().to_lowercase();
            fixed.insert(singular.clone());
            if plural != singular {
                irregular.insert(plural, singular);
            }
        }
        Ok(Self { irregular, fixed })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }

    pub fn lemmatize(&self, word: &str) -> String {
        let mut cur = word.trim().to_lowercase();
        loop {
            let next = self.step(&cur);
            if next == cur {
                return cur;
            }
            cur = next;
        }
    }

    fn step(&self, w: &str) -> String {
        if self.fixed.contains(w) || w.len() <= 2 {
            return w.to_string();
        }
        if let Some(s) = self.irregular.get(w) {
            return s.clone();
        }
        if let Some(stem) = w.strip_suffix("ies") {
            if stem.len() >= 2 {
                return format!("{stem}y");
            }
        }
        for suffix in ["sses", "xes", "ches", "shes", "zzes"] {
            if w.ends_with(suffix) {
                return w[..w.len() - 2].to_string();
            }
        }
        if w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
            return w[..w.len() - 1].to_string();
        }
        w.to_string()
    }
}

/// An object mentioned in a caption.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NounPhrase {
    /// Words as written, joined by single spaces.
    pub surface: String,
    /// Lemma of the head (last) noun.
    pub lemma: String,
    /// Lemmas of all nouns in the run, joined by single spaces.
    pub phrase: String,
    /// Token index range `[start, end)`.
    pub span: (usize, usize),
}

impl NounPhrase {
    /// A single-word phrase, handy for tests and detector labels.
    pub fn word(lemma: &str) -> Self {
        Self {
            surface: lemma.to_string(),
            lemma: lemma.to_string(),
            phrase: lemma.to_string(),
            span: (0, 1),
        }
    }
}

impl fmt::Display for NounPhrase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.surface)
    }
}

/// Objects of a tagged caption, in caption order. Duplicates are kept.
pub fn extract_objects(caption: &Caption) -> Vec<NounPhrase> {
    let tokens = &caption.tokens;
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        if tokens[i].pos != PosTag::Noun {
            i += 1;
            continue;
        }
        let start = i;
        while i < tokens.len() && tokens[i].pos == PosTag::Noun {
            i += 1;
        }
        let before_of = tokens
            .get(i)
            .is_some_and(|t| t.surface.eq_ignore_ascii_case("of"));
        if before_of {
            continue;
        }
        let run = &tokens[start..i];
        out.push(NounPhrase {
            surface: run.iter().map(|t| t.surface.as_str()).collect::<Vec<_>>().join(" "),
            lemma: run[run.len() - 1].lemma.to_lowercase(),
            phrase: run
                .iter()
                .map(|t| t.lemma.to_lowercase())
                .collect::<Vec<_>>()
                .join(" "),
            span: (start, i),
        });
    }
    out
}

/// Embedding-plus-lexicon matcher deciding whether two words name the same
/// kind of object.
#[derive(Debug, Clone)]
pub struct SemanticMatcher {
    vectors: HashMap<String, Vec<f64>>,
    hypernyms: HashMap<String, BTreeSet<String>>,
    cosine_threshold: f64,
}

impl SemanticMatcher {
    /// Builds a matcher from word-vector text and hypernym TSV contents.
    pub fn from_strs(vectors: &str, hypernyms: &str, cosine_threshold: f64) -> Result<Self> {
        if !(cosine_threshold > 0.0) {
            return Err(Error::Config(format!(
                "cosine threshold must be positive, got {cosine_threshold}"
            )));
        }
        Ok(Self {
            vectors: parse_vectors(vectors)?,
            hypernyms: close_hypernyms(hypernyms)?,
            cosine_threshold,
        })
    }

    pub fn load(vectors: &Path, hypernyms: &Path, cosine_threshold: f64) -> Result<Self> {
        Self::from_strs(
            &std::fs::read_to_string(vectors)?,
            &std::fs::read_to_string(hypernyms)?,
            cosine_threshold,
        )
    }

    /// The small vocabulary shipped with the crate.
    pub fn bundled(cosine_threshold: f64) -> Result<Self> {
        Self::from_strs(BUNDLED_VECTORS, BUNDLED_HYPERNYMS, cosine_threshold)
    }

    /// Exact lemma equality only.
    pub fn literal() -> Self {
        Self {
            vectors: HashMap::new(),
            hypernyms: HashMap::new(),
            cosine_threshold: 1.01,
        }
    }

    pub fn cosine_threshold(&self) -> f64 {
        self.cosine_threshold
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn cosine(&self, a: &str, b: &str) -> Option<f64> {
        let va = self.vectors.get(a)?;
        let vb = self.vectors.get(b)?;
        Some(va.iter().zip(vb).map(|(x, y)| x * y).sum())
    }

    /// True when `general` is a transitive hypernym of `specific`.
    pub fn is_hypernym(&self, general: &str, specific: &str) -> bool {
        self.hypernyms
            .get(specific)
            .is_some_and(|set| set.contains(general))
    }

    pub fn same_category(&self, a: &str, b: &str) -> bool {
        if a == b {
            return true;
        }
        if self
            .cosine(a, b)
            .is_some_and(|c| c >= self.cosine_threshold)
        {
            return true;
        }
        self.is_hypernym(a, b) || self.is_hypernym(b, a)
    }
}

/// True when some phrase in `objects` names the same object as `target`.
pub fn contains_object(objects: &[NounPhrase], target: &NounPhrase, m: &SemanticMatcher) -> bool {
    objects
        .iter()
        .any(|o| o.phrase == target.phrase || m.same_category(&o.lemma, &target.lemma))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
}

fn parse_vectors(text: &str) -> Result<HashMap<String, Vec<f64>>> {
    let mut out = HashMap::new();
    let mut dim: Option<usize> = None;
    for (n, line) in data_lines(text) {
        let mut fields = line.split_whitespace();
        let Some(word) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        // optional "count dim" header
        if n == 1 && values.len() == 1 && word.parse::<usize>().is_ok() {
            dim = values[0].parse::<usize>().ok();
            continue;
        }
        let v: Vec<f64> = values
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Lexicon(format!("vector line {n}: {e}")))?;
        match dim {
            Some(d) if d != v.len() => {
                return Err(Error::Lexicon(format!(
                    "vector line {n}: expected {d} components, got {}",
                    v.len()
                )))
            }
            None => dim = Some(v.len()),
            _ => {}
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Lexicon(format!("vector line {n}: zero or invalid vector")));
        }
        out.insert(word.to_lowercase(), v.into_iter().map(|x| x / norm).collect());
    }
    Ok(out)
}

fn close_hypernyms(text: &str) -> Result<HashMap<String, BTreeSet<String>>> {
    let mut direct: HashMap<String, Vec<String>> = HashMap::new();
    for (n, line) in data_lines(text) {
        let mut cols = line.split('\t');
        let (Some(hypo), Some(hyper)) = (cols.next(), cols.next()) else {
            return Err(Error::Lexicon(format!("hypernym line {n}: expected two columns")));
        };
        direct
            .entry(hypo.trim().to_lowercase())
            .or_default()
            .push(hyper.trim().to_lowercase());
    }

    // depth-first closure; a node met again while still on the stack is a cycle
    #[derive(Clone, Copy, PartialEq)]
    enum State {
        Active,
        Done,
    }
    fn visit(
        node: &str,
        direct: &HashMap<String, Vec<String>>,
        state: &mut HashMap<String, State>,
        closed: &mut HashMap<String, BTreeSet<String>>,
    ) -> Result<()> {
        match state.get(node) {
            Some(State::Done) => return Ok(()),
            Some(State::Active) => {
                return Err(Error::Lexicon(format!("hypernym cycle through {node:?}")))
            }
            None => {}
        }
        state.insert(node.to_string(), State::Active);
        let mut acc = BTreeSet::new();
        for parent in direct.get(node).into_iter().flatten() {
            visit(parent, direct, state, closed)?;
            acc.insert(parent.clone());
            if let Some(up) = closed.get(parent) {
                acc.extend(up.iter().cloned());
            }
        }
        state.insert(node.to_string(), State::Done);
        closed.insert(node.to_string(), acc);
        Ok(())
    }

    let mut state = HashMap::new();
    let mut closed = HashMap::new();
    let mut nodes: Vec<&String> = direct.keys().collect();
    nodes.sort();
    for node in nodes {
        visit(node, &direct, &mut state, &mut closed)?;
    }
    closed.retain(|_, v| !v.is_empty());
    Ok(closed)
}

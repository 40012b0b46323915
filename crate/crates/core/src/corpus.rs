//! Tokenization, corpus ingestion and the synthetic entity corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FwlError, Result};

pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const UNK_ID: usize = 0;
pub const EOS_ID: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Char,
    Word,
}

impl FromStr for TokenizerKind {
    type Err = FwlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "char" => Ok(TokenizerKind::Char),
            "word" => Ok(TokenizerKind::Word),
            _ => Err(FwlError::config("tokenizer", format!("expected `char` or `word`, got `{s}`"))),
        }
    }
}

/// Vocabulary with two reserved ids: `<unk>` = 0 and `<eos>` = 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub kind: TokenizerKind,
    pub vocab: Vec<String>,
}

impl Tokenizer {
    /// Builds a vocabulary from the given documents; symbols sorted for determinism.
    pub fn build<'a>(kind: TokenizerKind, docs: impl IntoIterator<Item = &'a str>) -> Self {
        let mut symbols = BTreeSet::new();
        for doc in docs {
            for s in split(kind, doc) {
                symbols.insert(s.to_string());
            }
        }
        symbols.remove(UNK);
        symbols.remove(EOS);
        let mut vocab = vec![UNK.to_string(), EOS.to_string()];
        vocab.extend(symbols);
        Tokenizer { kind, vocab }
    }

    /// Reads a vocabulary file with one symbol per line. Specials are added if absent.
    pub fn from_vocab_file(path: &Path, kind: TokenizerKind) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FwlError::io(path, e))?;
        let mut vocab = vec![UNK.to_string(), EOS.to_string()];
        for line in text.lines() {
            // a lone space or tab is a legitimate symbol in char mode
            let sym = if kind == TokenizerKind::Word { line.trim() } else { line };
            if sym.is_empty() || sym == UNK || sym == EOS || vocab.iter().any(|v| v == sym) {
                continue;
            }
            vocab.push(sym.to_string());
        }
        Ok(Tokenizer { kind, vocab })
    }

    pub fn write_vocab_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for v in &self.vocab {
            let _ = writeln!(out, "{}", v.replace('\n', "\\n"));
        }
        std::fs::write(path, out).map_err(|e| FwlError::io(path, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn index(&self) -> BTreeMap<&str, usize> {
        self.vocab.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }

    /// Token ids of `text`; unknown symbols map to `<unk>`. Returns the number of unknowns.
    pub fn encode_counting(&self, text: &str) -> (Vec<usize>, usize) {
        let idx = self.index();
        let mut unknown = 0;
        let ids = split(self.kind, text)
            .map(|s| {
                idx.get(s).copied().unwrap_or_else(|| {
                    unknown += 1;
                    UNK_ID
                })
            })
            .collect();
        (ids, unknown)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_counting(text).0
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        let sym = |&i: &usize| self.vocab.get(i).map_or(UNK, String::as_str);
        match self.kind {
            TokenizerKind::Char => ids.iter().map(sym).collect(),
            TokenizerKind::Word => ids.iter().map(sym).collect::<Vec<_>>().join(" "),
        }
    }
}

fn split(kind: TokenizerKind, text: &str) -> Box<dyn Iterator<Item = &str> + '_> {
    match kind {
        TokenizerKind::Word => Box::new(text.split_whitespace()),
        TokenizerKind::Char => Box::new(text.char_indices().map(move |(i, c)| &text[i..i + c.len_utf8()])),
    }
}

/// Splits raw text into documents at blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub documents: Vec<Vec<usize>>,
    pub tokenizer: Tokenizer,
}

impl Corpus {
    /// Tokenizes `text`; builds the vocabulary from it unless one is given.
    pub fn from_text(text: &str, kind: TokenizerKind, tokenizer: Option<&Tokenizer>) -> Result<Self> {
        let docs = split_documents(text);
        if docs.is_empty() {
            return Err(FwlError::config("corpus", "no documents found"));
        }
        let tokenizer = match tokenizer {
            Some(t) => t.clone(),
            None => Tokenizer::build(kind, docs.iter().map(String::as_str)),
        };
        let documents: Vec<Vec<usize>> = docs
            .iter()
            .map(|d| tokenizer.encode(d))
            .filter(|d| !d.is_empty())
            .collect();
        if documents.is_empty() {
            return Err(FwlError::config("corpus", "all documents are empty"));
        }
        Ok(Corpus { documents, tokenizer })
    }

    pub fn ingest(path: &Path, kind: TokenizerKind, tokenizer: Option<&Tokenizer>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FwlError::io(path, e))?;
        Corpus::from_text(&text, kind, tokenizer)
    }

    pub fn num_tokens(&self) -> usize {
        self.documents.iter().map(Vec::len).sum()
    }

    /// All documents joined, each followed by `<eos>`.
    pub fn stream(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_tokens() + self.documents.len());
        for d in &self.documents {
            out.extend_from_slice(d);
            out.push(EOS_ID);
        }
        out
    }

    /// Token counts over the whole corpus, indexed by id.
    pub fn frequencies(&self) -> Vec<u64> {
        let mut f = vec![0u64; self.tokenizer.vocab_size()];
        for d in &self.documents {
            for &t in d {
                f[t] += 1;
            }
        }
        f
    }

    /// Fraction of tokens that already occurred earlier in their document.
    pub fn repeat_fraction(&self) -> f64 {
        let mut repeats = 0usize;
        for d in &self.documents {
            let mut seen = BTreeSet::new();
            for &t in d {
                if !seen.insert(t) {
                    repeats += 1;
                }
            }
        }
        repeats as f64 / self.num_tokens().max(1) as f64
    }
}

/// Settings of the synthetic entity corpus.
///
/// Names come from a fixed pool of made-up words. Each document picks a few
/// of them and mentions them over and over in templated sentences, mixed
/// with filler sentences. A name is rare in the corpus as a whole but
/// frequent inside the documents that use it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EntityCorpusConfig {
    pub n_docs: usize,
    pub pool_size: usize,
    pub names_per_doc: usize,
    pub sentences_per_doc: usize,
    /// Probability that a sentence is filler with no name in it.
    pub filler_prob: f64,
    pub seed: u64,
}

impl Default for EntityCorpusConfig {
    fn default() -> Self {
        EntityCorpusConfig {
            n_docs: 200,
            pool_size: 200,
            names_per_doc: 4,
            sentences_per_doc: 24,
            filler_prob: 0.3,
            seed: 0,
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const ADJ: &[&str] = &["old", "red", "small", "quiet", "happy", "tall"];
const NOUN: &[&str] = &["dog", "house", "river", "car", "tree", "bird"];
const VERB: &[&str] = &["sleeps", "waits", "moves", "shines", "falls", "grows"];
const NAME_POOL_SEED: u64 = 0x6e61_6d65;
pub const MAX_NAME_POOL: usize = 4900;

/// The first `n` names of the fixed pool (two consonant-vowel syllables each).
pub fn name_pool(n: usize) -> Vec<String> {
    let syllables: Vec<[u8; 2]> = CONSONANTS
        .iter()
        .flat_map(|&c| VOWELS.iter().map(move |&v| [c, v]))
        .collect();
    let mut names: Vec<String> = syllables
        .iter()
        .flat_map(|a| syllables.iter().map(move |b| String::from_utf8(vec![a[0], a[1], b[0], b[1]]).unwrap()))
        .collect();
    names.shuffle(&mut ChaCha8Rng::seed_from_u64(NAME_POOL_SEED));
    names.truncate(n);
    names
}

/// Generates the entity corpus as text, documents separated by blank lines.
pub fn generate_entity_corpus(cfg: &EntityCorpusConfig) -> Result<String> {
    if cfg.pool_size == 0 || cfg.pool_size > MAX_NAME_POOL {
        return Err(FwlError::config("pool_size", format!("must be in 1..={MAX_NAME_POOL}")));
    }
    if cfg.names_per_doc < 2 || cfg.names_per_doc > cfg.pool_size {
        return Err(FwlError::config("names_per_doc", "must be in 2..=pool_size"));
    }
    if cfg.n_docs == 0 || cfg.sentences_per_doc == 0 {
        return Err(FwlError::config("n_docs", "documents and sentences must be positive"));
    }
    if !(0.0..1.0).contains(&cfg.filler_prob) {
        return Err(FwlError::config("filler_prob", "must be in [0, 1)"));
    }
    let pool = name_pool(cfg.pool_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pick = |rng: &mut ChaCha8Rng, words: &[&'static str]| words[rng.random_range(0..words.len())];
    let mut out = String::new();
    for doc in 0..cfg.n_docs {
        if doc > 0 {
            out.push('\n');
        }
        let names: Vec<&str> = pool
            .choose_multiple(&mut rng, cfg.names_per_doc)
            .map(String::as_str)
            .collect();
        for _ in 0..cfg.sentences_per_doc {
            if rng.random::<f64>() < cfg.filler_prob {
                let (a, n, v) = (pick(&mut rng, ADJ), pick(&mut rng, NOUN), pick(&mut rng, VERB));
                let _ = writeln!(out, "the {a} {n} {v} .");
                continue;
            }
            let i = rng.random_range(0..names.len());
            let e = names[i];
            match rng.random_range(0..3) {
                0 => {
                    let (a, n) = (pick(&mut rng, ADJ), pick(&mut rng, NOUN));
                    let _ = writeln!(out, "{e} saw the {a} {n} .");
                }
                1 => {
                    let j = (i + rng.random_range(1..names.len())) % names.len();
                    let v = pick(&mut rng, VERB);
                    let _ = writeln!(out, "{e} and {} {v} .", names[j]);
                }
                _ => {
                    let (n, v) = (pick(&mut rng, NOUN), pick(&mut rng, VERB));
                    let _ = writeln!(out, "the {n} of {e} {v} .");
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_documents_share_vocab() {
        let c = Corpus::from_text("ab\n\nba", TokenizerKind::Char, None).unwrap();
        assert_eq!(c.documents.len(), 2);
        assert_eq!(c.tokenizer.vocab_size(), 4);
        assert_eq!(c.documents[0], vec![2, 3]);
        assert_eq!(c.documents[1], vec![3, 2]);
    }

    #[test]
    fn char_round_trip() {
        let text = "héllo, wörld\nline two";
        let t = Tokenizer::build(TokenizerKind::Char, [text]);
        assert_eq!(t.decode(&t.encode(text)), text);
    }

    #[test]
    fn word_mode_maps_unknowns() {
        let t = Tokenizer::build(TokenizerKind::Word, ["a b c"]);
        let (ids, unk) = t.encode_counting("a z c");
        assert_eq!(unk, 1);
        assert_eq!(ids[1], UNK_ID);
        assert_eq!(t.decode(&t.encode("c b")), "c b");
    }

    #[test]
    fn blank_line_split() {
        let docs = split_documents("a\nb\n\n\n  \nc\n");
        assert_eq!(docs, vec!["a\nb".to_string(), "c".to_string()]);
        assert!(Corpus::from_text("\n\n", TokenizerKind::Char, None).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let t = Tokenizer::build(TokenizerKind::Word, ["x y z"]);
        t.write_vocab_file(&p).unwrap();
        assert_eq!(Tokenizer::from_vocab_file(&p, TokenizerKind::Word).unwrap(), t);
        assert!(matches!(
            Tokenizer::from_vocab_file(&dir.path().join("missing"), TokenizerKind::Word),
            Err(FwlError::Io { .. })
        ));
    }

    #[test]
    fn entity_corpus_is_seeded() {
        let cfg = EntityCorpusConfig {
            n_docs: 5,
            ..Default::default()
        };
        let a = generate_entity_corpus(&cfg).unwrap();
        assert_eq!(a, generate_entity_corpus(&cfg).unwrap());
        let c = Corpus::from_text(&a, TokenizerKind::Word, None).unwrap();
        assert_eq!(c.documents.len(), 5);
        assert!(c.repeat_fraction() > 0.5);
    }

    #[test]
    fn documents_use_few_names_from_the_pool() {
        let cfg = EntityCorpusConfig {
            n_docs: 20,
            ..Default::default()
        };
        let pool: BTreeSet<String> = name_pool(cfg.pool_size).into_iter().collect();
        assert_eq!(pool.len(), cfg.pool_size);
        for w in ADJ.iter().chain(NOUN).chain(VERB).chain(&["the", "saw", "and", "of", "."]) {
            assert!(!pool.contains(*w));
        }
        let text = generate_entity_corpus(&cfg).unwrap();
        let mut all = BTreeSet::new();
        for doc in split_documents(&text) {
            let names: BTreeSet<String> = doc.split_whitespace().filter(|w| pool.contains(*w)).map(String::from).collect();
            assert!(names.len() <= cfg.names_per_doc);
            all.extend(names);
        }
        assert!(all.len() > 2 * cfg.names_per_doc);
    }

    #[test]
    fn entity_config_is_validated() {
        for cfg in [
            EntityCorpusConfig { pool_size: 0, ..Default::default() },
            EntityCorpusConfig { names_per_doc: 1, ..Default::default() },
            EntityCorpusConfig { filler_prob: 1.0, ..Default::default() },
            EntityCorpusConfig { n_docs: 0, ..Default::default() },
        ] {
            assert!(matches!(generate_entity_corpus(&cfg), Err(FwlError::Config { .. })));
        }
    }
}

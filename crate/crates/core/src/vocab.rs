//! Shared vocabulary, BPE merges, special tokens and language tags.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const MASK: TokenId = 0;
pub const PAD: TokenId = 1;
pub const SEP: TokenId = 2;
pub const BOS: TokenId = 3;
pub const EOS: TokenId = 4;
pub const UNK: TokenId = 5;
pub const NUM_SPECIAL: usize = 6;

/// Surface forms of the reserved tokens, indexed by id.
pub const SPECIAL_TOKENS: [&str; NUM_SPECIAL] = ["[M]", "[P]", "[S]", "<s>", "</s>", "<unk>"];

/// Suffix marking a subword that continues into the next piece of the same word.
pub const CONTINUATION: &str = "@@";

const MERGES_HEADER: &str = "#MERGES";

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIAL
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabError {
    #[error("empty training data")]
    EmptyTrainingData,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: TokenId, size: usize },
    #[error("vocabulary file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate language name {0:?}")]
    DuplicateLanguage(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LanguageTag {
    pub id: usize,
    pub name: String,
}

/// Dense, ordered set of language tags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageSet {
    tags: Vec<LanguageTag>,
}

impl LanguageSet {
    pub fn new<I, S>(names: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tags: Vec<LanguageTag> = Vec::new();
        for name in names {
            let name = name.into();
            if tags.iter().any(|t| t.name == name) {
                return Err(VocabError::DuplicateLanguage(name));
            }
            tags.push(LanguageTag { id: tags.len(), name });
        }
        Ok(Self { tags })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&LanguageTag> {
        self.tags.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&LanguageTag> {
        self.tags.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.tags.iter().map(|t| t.name.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LanguageTag> {
        self.tags.iter()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseUnit {
    /// Each whitespace-separated symbol is one base unit.
    Word,
    /// Symbols are split into characters and BPE merges rebuild subwords.
    Char,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    base: BaseUnit,
}

impl Vocab {
    fn from_parts(plain: Vec<String>, merges: Vec<(String, String)>, base: BaseUnit) -> Self {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(plain);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            index,
            merges,
            base,
        }
    }

    /// A word-level vocabulary over exactly `symbols`, sorted, after the specials.
    pub fn from_symbols<I, S>(symbols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = symbols
            .into_iter()
            .map(Into::into)
            .filter(|s| !SPECIAL_TOKENS.contains(&s.as_str()))
            .collect();
        Self::from_parts(set.into_iter().collect(), Vec::new(), BaseUnit::Word)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn base(&self) -> BaseUnit {
        self.base
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a plain (non-special) token.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied().filter(|&id| !is_special(id))
    }

    /// Ids of every non-special token.
    pub fn plain_ids(&self) -> std::ops::Range<TokenId> {
        NUM_SPECIAL as TokenId..self.tokens.len() as TokenId
    }

    pub fn encode<S: AsRef<str>>(&self, text: &[S]) -> Vec<TokenId> {
        match self.base {
            BaseUnit::Word => text
                .iter()
                .map(|s| self.id(s.as_ref()).unwrap_or(UNK))
                .collect(),
            BaseUnit::Char => {
                let mut out = Vec::new();
                for word in text {
                    let pieces = apply_merges(chars_of(word.as_ref()), &self.merges);
                    let last = pieces.len().saturating_sub(1);
                    for (i, piece) in pieces.into_iter().enumerate() {
                        let surface = if i < last {
                            format!("{piece}{CONTINUATION}")
                        } else {
                            piece
                        };
                        out.push(self.id(&surface).unwrap_or(UNK));
                    }
                }
                out
            }
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<String>, VocabError> {
        let mut pieces = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(VocabError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            pieces.push(tok);
        }
        Ok(match self.base {
            BaseUnit::Word => pieces.into_iter().map(str::to_string).collect(),
            BaseUnit::Char => {
                let mut words = Vec::new();
                let mut current = String::new();
                for piece in pieces {
                    match piece.strip_suffix(CONTINUATION) {
                        Some(stem) if !is_special_str(piece) => current.push_str(stem),
                        _ => {
                            current.push_str(piece);
                            words.push(std::mem::take(&mut current));
                        }
                    }
                }
                if !current.is_empty() {
                    words.push(current);
                }
                words
            }
        })
    }

    /// Serialize as `token<TAB>id` lines followed by the merge section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, tok) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{tok}\t{id}\n"));
        }
        out.push_str(MERGES_HEADER);
        out.push('\n');
        for (a, b) in &self.merges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut plain = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        let mut next_id = 0usize;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let err = |msg: &str| VocabError::Parse {
                line: line_no,
                msg: msg.to_string(),
            };
            if in_merges {
                let (a, b) = line.split_once(' ').ok_or_else(|| err("expected merge pair"))?;
                if a.is_empty() || b.is_empty() || b.contains(' ') {
                    return Err(err("malformed merge pair"));
                }
                merges.push((a.to_string(), b.to_string()));
                continue;
            }
            if line == MERGES_HEADER {
                in_merges = true;
                continue;
            }
            let (tok, id) = line.split_once('\t').ok_or_else(|| err("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| err("id is not an integer"))?;
            if id != next_id {
                return Err(err("ids must be dense and ascending"));
            }
            if id < NUM_SPECIAL {
                if tok != SPECIAL_TOKENS[id] {
                    return Err(err("reserved id holds the wrong special token"));
                }
            } else {
                plain.push(tok.to_string());
            }
            next_id += 1;
        }
        if !in_merges {
            return Err(VocabError::Parse {
                line: text.lines().count() + 1,
                msg: format!("missing {MERGES_HEADER} section"),
            });
        }
        if next_id < NUM_SPECIAL {
            return Err(VocabError::Parse {
                line: next_id + 1,
                msg: "special tokens missing".into(),
            });
        }
        let base = if plain.iter().any(|t| t.ends_with(CONTINUATION)) {
            BaseUnit::Char
        } else {
            BaseUnit::Word
        };
        let vocab = Self::from_parts(plain, merges, base);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(VocabError::Parse {
                line: 0,
                msg: "duplicate token".into(),
            });
        }
        Ok(vocab)
    }
}

fn is_special_str(tok: &str) -> bool {
    SPECIAL_TOKENS.contains(&tok)
}

fn chars_of(word: &str) -> Vec<String> {
    word.chars().map(|c| c.to_string()).collect()
}

fn apply_merges(mut pieces: Vec<String>, merges: &[(String, String)]) -> Vec<String> {
    for (a, b) in merges {
        pieces = merge_pair(&pieces, a, b);
    }
    pieces
}

fn merge_pair(pieces: &[String], a: &str, b: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(pieces.len());
    let mut i = 0;
    while i < pieces.len() {
        if i + 1 < pieces.len() && pieces[i] == a && pieces[i + 1] == b {
            out.push(format!("{a}{b}"));
            i += 2;
        } else {
            out.push(pieces[i].clone());
            i += 1;
        }
    }
    out
}

/// Learn a shared vocabulary over several corpora.
///
/// Each corpus is a list of sentences, each sentence a list of
/// whitespace-separated symbols. With [`BaseUnit::Word`] there is nothing
/// below the symbol level to merge, so no merges are learned. With
/// [`BaseUnit::Char`] up to `num_merges` BPE merges are learned; the most
/// frequent adjacent pair wins and ties go to the lexicographically smallest
/// pair.
pub fn learn_vocab(
    corpora: &[Vec<Vec<String>>],
    num_merges: usize,
    base: BaseUnit,
) -> Result<Vocab, VocabError> {
    let mut word_counts: BTreeMap<&str, usize> = BTreeMap::new();
    for sentence in corpora.iter().flatten() {
        for sym in sentence {
            if !is_special_str(sym) && !sym.is_empty() {
                *word_counts.entry(sym.as_str()).or_default() += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(VocabError::EmptyTrainingData);
    }
    match base {
        BaseUnit::Word => Ok(Vocab::from_symbols(word_counts.keys().copied())),
        BaseUnit::Char => {
            let mut words: Vec<(Vec<String>, usize)> = word_counts
                .iter()
                .map(|(w, &c)| (chars_of(w), c))
                .collect();
            let base_chars: BTreeSet<String> =
                words.iter().flat_map(|(p, _)| p.iter().cloned()).collect();
            let mut merges: Vec<(String, String)> = Vec::new();
            while merges.len() < num_merges {
                let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
                for (pieces, count) in &words {
                    for w in pieces.windows(2) {
                        *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += count;
                    }
                }
                // BTreeMap iterates pairs in ascending order, so keeping the
                // first maximum implements the lexicographic tie-break.
                let mut best: Option<((&str, &str), usize)> = None;
                for (pair, count) in pairs {
                    if best.is_none_or(|(_, c)| count > c) {
                        best = Some((pair, count));
                    }
                }
                let Some(((a, b), _)) = best else { break };
                let (a, b) = (a.to_string(), b.to_string());
                for (pieces, _) in words.iter_mut() {
                    *pieces = merge_pair(pieces, &a, &b);
                }
                merges.push((a, b));
            }
            let mut units: Vec<String> = base_chars.into_iter().collect();
            for (a, b) in &merges {
                let merged = format!("{a}{b}");
                if !units.contains(&merged) {
                    units.push(merged);
                }
            }
            let mut plain = Vec::with_capacity(units.len() * 2);
            for unit in units {
                plain.push(format!("{unit}{CONTINUATION}"));
                plain.push(unit);
            }
            Ok(Vocab::from_parts(plain, merges, BaseUnit::Char))
        }
    }
}

//! Synthetic twin languages, task datasets and JSONL persistence.
//!
//! Language A draws sentences from a bigram-biased generator over its
//! lexicon. Language B is A relabelled through a fixed bijection, followed by
//! adjacent swaps inside fixed-size blocks. Every sentence ends with the
//! language's marker token, which the bijection fixes and the reorder never
//! moves.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::vocab::{LanguageSet, LanguageTag, TokenId, Vocab, SEP};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("requested {requested} examples but only {available} sentences are available")]
    NotEnoughSentences { requested: usize, available: usize },
    #[error("sentence {index} has no tokens to carve an answer span from")]
    SentenceTooShort { index: usize },
    #[error("token {0} is not in the source lexicon")]
    ForeignToken(TokenId),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Lexicon size per language, marker included.
    pub vocab_size_per_lang: usize,
    /// Inclusive bounds on the number of words before the marker.
    pub sentence_len_range: (usize, usize),
    /// Sentences in each monolingual corpus.
    pub mono_size: usize,
    pub parallel_size: usize,
    pub reorder_window: usize,
    /// Probability that the next word follows the bigram table.
    pub bigram_strength: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size_per_lang: 50,
            sentence_len_range: (4, 8),
            mono_size: 5000,
            parallel_size: 5000,
            reorder_window: 2,
            bigram_strength: 0.5,
            seed: 0,
        }
    }
}

/// Favoured successors per word in the bigram table.
const SUCCESSORS: usize = 3;

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.into()));
        let (lo, hi) = self.sentence_len_range;
        if self.vocab_size_per_lang < 2 {
            return bad("vocab_size_per_lang must be at least 2 (marker plus one word)");
        }
        if lo < 1 || hi < lo {
            return bad("sentence_len_range needs 1 <= min <= max");
        }
        if self.reorder_window < 1 {
            return bad("reorder_window must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.bigram_strength) {
            return bad("bigram_strength must lie in [0, 1]");
        }
        let words = (self.vocab_size_per_lang - 1) as f64;
        let distinct: f64 = (lo..=hi).map(|n| words.powi(n as i32)).sum();
        let needed = (2 * self.mono_size + self.parallel_size) as f64;
        if distinct < 2.0 * needed {
            return bad("too few distinct sentences for disjoint splits of the requested sizes");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonolingualCorpus {
    pub lang: LanguageTag,
    pub sentences: Vec<Vec<TokenId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskExample {
    /// Sentence, then `[S]`, then the answer span.
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub lang: LanguageTag,
}

/// The generated language pair together with its corpora.
#[derive(Clone, Debug)]
pub struct TwinLanguages {
    pub config: SynthConfig,
    pub languages: LanguageSet,
    pub vocab: Vocab,
    pub mono_a: MonolingualCorpus,
    pub mono_b: MonolingualCorpus,
    pub parallel: ParallelCorpus,
    /// `lexicons[lang][k]` is the id of word `k`; word 0 is the marker.
    lexicons: [Vec<TokenId>; 2],
    /// Word index in A to word index in B.
    sigma: Vec<usize>,
    sigma_inv: Vec<usize>,
}

pub const LANG_A: &str = "la";
pub const LANG_B: &str = "lb";

/// Swap adjacent tokens at even offsets inside each block. An involution.
fn reorder(body: &mut [TokenId], window: usize) {
    for block in body.chunks_mut(window) {
        for j in (0..block.len().saturating_sub(1)).step_by(2) {
            block.swap(j, j + 1);
        }
    }
}

impl TwinLanguages {
    pub fn generate(cfg: &SynthConfig) -> Result<Self, CorpusError> {
        cfg.validate()?;
        let n = cfg.vocab_size_per_lang;
        let width = (n - 1).to_string().len().max(2);
        let sym = |prefix: char, k: usize| format!("{prefix}{k:0width$}");
        let symbols: Vec<String> = ['a', 'b']
            .iter()
            .flat_map(|&p| (0..n).map(move |k| (p, k)))
            .map(|(p, k)| sym(p, k))
            .collect();
        let vocab = Vocab::from_symbols(&symbols);
        let lexicons = ['a', 'b'].map(|p| {
            (0..n)
                .map(|k| vocab.id(&sym(p, k)).expect("symbol registered"))
                .collect::<Vec<_>>()
        });

        let mut sigma_rng = rng::stream(cfg.seed, "synth.sigma");
        let mut rest: Vec<usize> = (1..n).collect();
        rest.shuffle(&mut sigma_rng);
        let sigma: Vec<usize> = std::iter::once(0).chain(rest).collect();
        let mut sigma_inv = vec![0; n];
        for (a, &b) in sigma.iter().enumerate() {
            sigma_inv[b] = a;
        }

        let mut table_rng = rng::stream(cfg.seed, "synth.bigram");
        let successors: Vec<[usize; SUCCESSORS]> = (0..n)
            .map(|_| std::array::from_fn(|_| table_rng.gen_range(1..n)))
            .collect();

        let mut sent_rng = rng::stream(cfg.seed, "synth.sentences");
        let total = 2 * cfg.mono_size + cfg.parallel_size;
        let mut seen = HashSet::with_capacity(total);
        let mut bodies = Vec::with_capacity(total);
        let (lo, hi) = cfg.sentence_len_range;
        while bodies.len() < total {
            let len = sent_rng.gen_range(lo..=hi);
            let mut body = Vec::with_capacity(len);
            let mut prev = sent_rng.gen_range(1..n);
            body.push(prev);
            while body.len() < len {
                prev = if sent_rng.gen_bool(cfg.bigram_strength) {
                    successors[prev][sent_rng.gen_range(0..SUCCESSORS)]
                } else {
                    sent_rng.gen_range(1..n)
                };
                body.push(prev);
            }
            if seen.insert(body.clone()) {
                bodies.push(body);
            }
        }

        let languages = LanguageSet::new([LANG_A, LANG_B]).expect("distinct names");
        let la = languages.get(0).expect("two languages").clone();
        let lb = languages.get(1).expect("two languages").clone();
        let mut twin = Self {
            config: cfg.clone(),
            languages,
            vocab,
            mono_a: MonolingualCorpus {
                lang: la.clone(),
                sentences: Vec::new(),
            },
            mono_b: MonolingualCorpus {
                lang: lb.clone(),
                sentences: Vec::new(),
            },
            parallel: ParallelCorpus {
                src_lang: la,
                tgt_lang: lb,
                pairs: Vec::new(),
            },
            lexicons,
            sigma,
            sigma_inv,
        };
        let to_a = |body: &[usize]| -> Vec<TokenId> {
            body.iter()
                .chain(std::iter::once(&0))
                .map(|&k| twin.lexicons[0][k])
                .collect()
        };
        let a_sentences: Vec<Vec<TokenId>> = bodies.iter().map(|b| to_a(b)).collect();
        let (mono_a, rest) = a_sentences.split_at(cfg.mono_size);
        let (mono_b_src, parallel_src) = rest.split_at(cfg.mono_size);
        let mono_b = mono_b_src
            .iter()
            .map(|s| twin.translate(s))
            .collect::<Result<Vec<_>, _>>()?;
        let pairs = parallel_src
            .iter()
            .map(|s| Ok((s.clone(), twin.translate(s)?)))
            .collect::<Result<Vec<_>, CorpusError>>()?;
        twin.mono_a.sentences = mono_a.to_vec();
        twin.mono_b.sentences = mono_b;
        twin.parallel.pairs = pairs;
        Ok(twin)
    }

    pub fn lang_a(&self) -> &LanguageTag {
        &self.mono_a.lang
    }

    pub fn lang_b(&self) -> &LanguageTag {
        &self.mono_b.lang
    }

    /// Token ids of a language's lexicon, marker first.
    pub fn lexicon(&self, lang: usize) -> &[TokenId] {
        &self.lexicons[lang]
    }

    pub fn marker(&self, lang: usize) -> TokenId {
        self.lexicons[lang][0]
    }

    /// Language whose lexicon contains `token`, if any.
    pub fn lang_of(&self, token: TokenId) -> Option<usize> {
        (0..2).find(|&l| self.lexicons[l].contains(&token))
    }

    fn word_index(&self, lang: usize, token: TokenId) -> Result<usize, CorpusError> {
        self.lexicons[lang]
            .iter()
            .position(|&t| t == token)
            .ok_or(CorpusError::ForeignToken(token))
    }

    fn map_words(&self, ids: &[TokenId], from: usize, perm: &[usize]) -> Result<Vec<TokenId>, CorpusError> {
        let to = 1 - from;
        ids.iter()
            .map(|&t| Ok(self.lexicons[to][perm[self.word_index(from, t)?]]))
            .collect()
    }

    /// Relabel tokenwise from `from` into the other language without reordering.
    pub fn relabel(&self, ids: &[TokenId], from: usize) -> Result<Vec<TokenId>, CorpusError> {
        let perm = if from == 0 { &self.sigma } else { &self.sigma_inv };
        self.map_words(ids, from, perm)
    }

    fn convert(&self, ids: &[TokenId], from: usize) -> Result<Vec<TokenId>, CorpusError> {
        let mut out = self.relabel(ids, from)?;
        let marker = self.marker(1 - from);
        let body_len = if out.last() == Some(&marker) {
            out.len() - 1
        } else {
            out.len()
        };
        reorder(&mut out[..body_len], self.config.reorder_window);
        Ok(out)
    }

    /// Translate an A sentence into B.
    pub fn translate(&self, ids: &[TokenId]) -> Result<Vec<TokenId>, CorpusError> {
        self.convert(ids, 0)
    }

    /// Translate a B sentence back into A.
    pub fn translate_back(&self, ids: &[TokenId]) -> Result<Vec<TokenId>, CorpusError> {
        self.convert(ids, 1)
    }

    /// The B counterpart of an A task example: the sentence is translated and
    /// the answer span relabelled, so the target is again given by the task rule.
    pub fn translate_example(&self, ex: &TaskExample) -> Result<TaskExample, CorpusError> {
        let sep = ex
            .input
            .iter()
            .position(|&t| t == SEP)
            .ok_or_else(|| CorpusError::InvalidConfig("task input lacks [S]".into()))?;
        let mut input = self.translate(&ex.input[..sep])?;
        input.push(SEP);
        input.extend(self.relabel(&ex.input[sep + 1..], 0)?);
        Ok(TaskExample {
            input,
            target: self.relabel(&ex.target, 0)?,
            lang: self.lang_b().clone(),
        })
    }
}

/// The task rule: the answer span after `[S]`, reversed, then the marker.
pub fn task_target(input: &[TokenId], marker: TokenId) -> Option<Vec<TokenId>> {
    let sep = input.iter().position(|&t| t == SEP)?;
    if input[sep + 1..].contains(&SEP) {
        return None;
    }
    let mut target: Vec<TokenId> = input[sep + 1..].iter().rev().copied().collect();
    target.push(marker);
    Some(target)
}

/// Draw `n` distinct sentences and carve an answer span of 1 to 3 words from each.
///
/// A trailing `marker` is not eligible for the span.
pub fn make_task_dataset(
    corpus: &MonolingualCorpus,
    marker: TokenId,
    n: usize,
    seed: u64,
) -> Result<Vec<TaskExample>, CorpusError> {
    if n > corpus.sentences.len() {
        return Err(CorpusError::NotEnoughSentences {
            requested: n,
            available: corpus.sentences.len(),
        });
    }
    let mut rng = rng::stream(seed, &format!("task.{}", corpus.lang.name));
    let mut order: Vec<usize> = (0..corpus.sentences.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .take(n)
        .map(|index| {
            let sentence = &corpus.sentences[index];
            let body = match sentence.split_last() {
                Some((&last, body)) if last == marker => body,
                _ => sentence.as_slice(),
            };
            if body.is_empty() {
                return Err(CorpusError::SentenceTooShort { index });
            }
            let len = rng.gen_range(1..=body.len().min(3));
            let start = rng.gen_range(0..=body.len() - len);
            let mut input = sentence.clone();
            input.push(SEP);
            input.extend_from_slice(&body[start..start + len]);
            let target = task_target(&input, marker).expect("one separator");
            Ok(TaskExample {
                input,
                target,
                lang: corpus.lang.clone(),
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MonoRecord {
    lang: String,
    ids: Vec<TokenId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParallelRecord {
    src: Vec<TokenId>,
    tgt: Vec<TokenId>,
    src_lang: String,
    tgt_lang: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskRecord {
    input: Vec<TokenId>,
    target: Vec<TokenId>,
    lang: String,
}

/// Write one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read one JSON record per line; blank lines are skipped, bad lines reported by number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn check_lang(line: usize, found: &str, expected: &LanguageTag) -> Result<(), CorpusError> {
    if found != expected.name {
        return Err(CorpusError::Parse {
            line,
            msg: format!("language {found:?}, expected {:?}", expected.name),
        });
    }
    Ok(())
}

fn check_nonempty(line: usize, ids: &[TokenId]) -> Result<(), CorpusError> {
    if ids.is_empty() {
        return Err(CorpusError::Parse {
            line,
            msg: "empty sentence".into(),
        });
    }
    Ok(())
}

impl MonolingualCorpus {
    pub fn save_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let records: Vec<MonoRecord> = self
            .sentences
            .iter()
            .map(|s| MonoRecord {
                lang: self.lang.name.clone(),
                ids: s.clone(),
            })
            .collect();
        write_jsonl(path, &records)
    }

    pub fn load_jsonl(path: &Path, lang: &LanguageTag) -> Result<Self, CorpusError> {
        let records: Vec<MonoRecord> = read_jsonl(path)?;
        for (i, r) in records.iter().enumerate() {
            check_lang(i + 1, &r.lang, lang)?;
            check_nonempty(i + 1, &r.ids)?;
        }
        Ok(Self {
            lang: lang.clone(),
            sentences: records.into_iter().map(|r| r.ids).collect(),
        })
    }
}

impl ParallelCorpus {
    pub fn save_jsonl(&self, path: &Path) -> Result<(), CorpusError> {
        let records: Vec<ParallelRecord> = self
            .pairs
            .iter()
            .map(|(x, y)| ParallelRecord {
                src: x.clone(),
                tgt: y.clone(),
                src_lang: self.src_lang.name.clone(),
                tgt_lang: self.tgt_lang.name.clone(),
            })
            .collect();
        write_jsonl(path, &records)
    }

    pub fn load_jsonl(path: &Path, src_lang: &LanguageTag, tgt_lang: &LanguageTag) -> Result<Self, CorpusError> {
        let records: Vec<ParallelRecord> = read_jsonl(path)?;
        for (i, r) in records.iter().enumerate() {
            check_lang(i + 1, &r.src_lang, src_lang)?;
            check_lang(i + 1, &r.tgt_lang, tgt_lang)?;
            check_nonempty(i + 1, &r.src)?;
            check_nonempty(i + 1, &r.tgt)?;
        }
        Ok(Self {
            src_lang: src_lang.clone(),
            tgt_lang: tgt_lang.clone(),
            pairs: records.into_iter().map(|r| (r.src, r.tgt)).collect(),
        })
    }
}

pub fn save_tasks(path: &Path, examples: &[TaskExample]) -> Result<(), CorpusError> {
    let records: Vec<TaskRecord> = examples
        .iter()
        .map(|e| TaskRecord {
            input: e.input.clone(),
            target: e.target.clone(),
            lang: e.lang.name.clone(),
        })
        .collect();
    write_jsonl(path, &records)
}

pub fn load_tasks(path: &Path, languages: &LanguageSet) -> Result<Vec<TaskExample>, CorpusError> {
    let records: Vec<TaskRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let lang = languages.by_name(&r.lang).ok_or_else(|| CorpusError::Parse {
                line: i + 1,
                msg: format!("unknown language {:?}", r.lang),
            })?;
            if r.input.iter().filter(|&&t| t == SEP).count() != 1 {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    msg: "task input must contain exactly one [S]".into(),
                });
            }
            Ok(TaskExample {
                input: r.input,
                target: r.target,
                lang: lang.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(window: usize) -> SynthConfig {
        SynthConfig {
            mono_size: 200,
            parallel_size: 100,
            reorder_window: window,
            seed: 7,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn window_one_is_pure_relabelling() {
        let twin = TwinLanguages::generate(&small(1)).unwrap();
        for (a, b) in &twin.parallel.pairs {
            assert_eq!(b, &twin.relabel(a, 0).unwrap());
        }
    }

    #[test]
    fn reorder_swaps_even_offsets_within_blocks() {
        let mut body = [1, 2, 3, 4, 5, 6, 7];
        reorder(&mut body, 3);
        assert_eq!(body, [2, 1, 3, 5, 4, 6, 7]);
        let mut body = [1, 2, 3, 4, 5];
        reorder(&mut body, 2);
        assert_eq!(body, [2, 1, 4, 3, 5]);
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = TwinLanguages::generate(&small(2)).unwrap();
        let b = TwinLanguages::generate(&small(2)).unwrap();
        assert_eq!(a.mono_a, b.mono_a);
        assert_eq!(a.mono_b, b.mono_b);
        assert_eq!(a.parallel, b.parallel);
        let c = TwinLanguages::generate(&SynthConfig { seed: 8, ..small(2) }).unwrap();
        assert_ne!(a.mono_a, c.mono_a);
    }

    #[test]
    fn splits_are_disjoint_and_well_formed() {
        let twin = TwinLanguages::generate(&small(2)).unwrap();
        let mono_a: HashSet<_> = twin.mono_a.sentences.iter().collect();
        let mono_b_src: Vec<_> = twin
            .mono_b
            .sentences
            .iter()
            .map(|s| twin.translate_back(s).unwrap())
            .collect();
        for (a, _) in &twin.parallel.pairs {
            assert!(!mono_a.contains(a));
            assert!(!mono_b_src.contains(a));
        }
        for s in &mono_b_src {
            assert!(!mono_a.contains(s));
        }
        for s in &twin.mono_a.sentences {
            assert_eq!(*s.last().unwrap(), twin.marker(0));
            assert!((5..=9).contains(&s.len()));
            assert!(s.iter().all(|&t| twin.lang_of(t) == Some(0)));
        }
        for s in &twin.mono_b.sentences {
            assert_eq!(*s.last().unwrap(), twin.marker(1));
            assert!(s.iter().all(|&t| twin.lang_of(t) == Some(1)));
        }
        assert_eq!(twin.vocab.len(), 106);
    }

    #[test]
    fn impossible_configs_are_rejected() {
        for cfg in [
            SynthConfig { vocab_size_per_lang: 1, ..small(2) },
            SynthConfig { reorder_window: 0, ..small(2) },
            SynthConfig { sentence_len_range: (0, 3), ..small(2) },
            SynthConfig { vocab_size_per_lang: 3, sentence_len_range: (1, 2), ..small(2) },
        ] {
            assert!(matches!(
                TwinLanguages::generate(&cfg),
                Err(CorpusError::InvalidConfig(_))
            ));
        }
    }

    #[test]
    fn task_rule_smallest_cases() {
        let (t1, t2, t3, m) = (10, 11, 12, 6);
        assert_eq!(task_target(&[t1, t2, t3, SEP, t2], m).unwrap(), vec![t2, m]);
        assert_eq!(task_target(&[t1, t2, t3, SEP, t2, t3], m).unwrap(), vec![t3, t2, m]);
        assert_eq!(task_target(&[t1, t2], m), None);
    }

    #[test]
    fn task_targets_recompute_from_inputs() {
        let twin = TwinLanguages::generate(&small(2)).unwrap();
        for (lang, corpus) in [(0, &twin.mono_a), (1, &twin.mono_b)] {
            let ds = make_task_dataset(corpus, twin.marker(lang), 150, 3).unwrap();
            for ex in &ds {
                assert_eq!(ex.input.iter().filter(|&&t| t == SEP).count(), 1);
                assert_eq!(task_target(&ex.input, twin.marker(lang)).unwrap(), ex.target);
                let sep = ex.input.iter().position(|&t| t == SEP).unwrap();
                let span = &ex.input[sep + 1..];
                assert!((1..=3).contains(&span.len()));
                assert!(ex.input[..sep - 1].windows(span.len()).any(|w| w == span));
            }
        }
    }

    #[test]
    fn translated_examples_follow_the_rule() {
        let twin = TwinLanguages::generate(&small(3)).unwrap();
        let ds = make_task_dataset(&twin.mono_a, twin.marker(0), 100, 4).unwrap();
        for ex in &ds {
            let b = twin.translate_example(ex).unwrap();
            let sep = ex.input.iter().position(|&t| t == SEP).unwrap();
            // Oracle: translate the sentence, relabel span and target tokenwise.
            let sentence = twin.translate(&ex.input[..sep]).unwrap();
            assert_eq!(&b.input[..sep], sentence.as_slice());
            let span: Vec<_> = ex.input[sep + 1..]
                .iter()
                .map(|&t| twin.relabel(&[t], 0).unwrap()[0])
                .collect();
            assert_eq!(&b.input[sep + 1..], span.as_slice());
            assert_eq!(task_target(&b.input, twin.marker(1)).unwrap(), b.target);
        }
    }

    #[test]
    fn too_many_task_examples_is_an_error() {
        let twin = TwinLanguages::generate(&small(2)).unwrap();
        assert!(matches!(
            make_task_dataset(&twin.mono_a, twin.marker(0), 201, 0),
            Err(CorpusError::NotEnoughSentences { requested: 201, available: 200 })
        ));
    }

    #[test]
    fn jsonl_round_trips() {
        let twin = TwinLanguages::generate(&small(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mono.jsonl");
        twin.mono_a.save_jsonl(&p).unwrap();
        assert_eq!(MonolingualCorpus::load_jsonl(&p, twin.lang_a()).unwrap(), twin.mono_a);
        let bytes = fs::read(&p).unwrap();
        MonolingualCorpus::load_jsonl(&p, twin.lang_a()).unwrap().save_jsonl(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), bytes);

        let p = dir.path().join("par.jsonl");
        twin.parallel.save_jsonl(&p).unwrap();
        let back = ParallelCorpus::load_jsonl(&p, twin.lang_a(), twin.lang_b()).unwrap();
        assert_eq!(back, twin.parallel);

        let p = dir.path().join("task.jsonl");
        let ds = make_task_dataset(&twin.mono_b, twin.marker(1), 20, 1).unwrap();
        save_tasks(&p, &ds).unwrap();
        assert_eq!(load_tasks(&p, &twin.languages).unwrap(), ds);
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.jsonl");
        fs::write(&p, "").unwrap();
        let lang = LanguageTag { id: 0, name: "la".into() };
        assert!(MonolingualCorpus::load_jsonl(&p, &lang).unwrap().sentences.is_empty());
    }

    #[test]
    fn malformed_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"lang\":\"la\",\"ids\":[6,7]}\n{\"lang\":\"la\",\"ids\":[6,\n").unwrap();
        let lang = LanguageTag { id: 0, name: "la".into() };
        match MonolingualCorpus::load_jsonl(&p, &lang) {
            Err(CorpusError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, "{\"lang\":\"lb\",\"ids\":[6]}\n").unwrap();
        assert!(matches!(
            MonolingualCorpus::load_jsonl(&p, &lang),
            Err(CorpusError::Parse { line: 1, .. })
        ));
    }

    proptest! {
        #[test]
        fn translation_is_a_bijection(
            words in proptest::collection::vec(1usize..50, 1..12),
            window in 1usize..5,
            with_marker in any::<bool>(),
        ) {
            let cfg = SynthConfig { mono_size: 5, parallel_size: 5, reorder_window: window, ..SynthConfig::default() };
            let twin = TwinLanguages::generate(&cfg).unwrap();
            let mut b: Vec<TokenId> = words.iter().map(|&k| twin.lexicon(1)[k]).collect();
            if with_marker {
                b.push(twin.marker(1));
            }
            let a = twin.translate_back(&b).unwrap();
            prop_assert_eq!(twin.translate(&a).unwrap(), b.clone());
            prop_assert_eq!(twin.translate_back(&twin.translate(&a).unwrap()).unwrap(), a);
        }
    }
}

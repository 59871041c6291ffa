//! Beam-search decoding with target-language tag forcing.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Float};
use crate::corpus::{read_jsonl, write_jsonl, CorpusError, MonolingualCorpus};
use crate::model::{CrossLayout, Graph, GroupSet, ModelError, Packed, Seq2SeqModel};
use crate::vocab::{is_special, TokenId, BOS, EOS};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error("empty input")]
    EmptyInput,
    #[error("allowed vocabulary must contain EOS")]
    MissingEos,
    #[error("allowed token {0} is outside the vocabulary")]
    TokenOutOfRange(TokenId),
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Maximum generated tokens, EOS included.
    pub max_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed_vocab: Option<BTreeSet<TokenId>>,
    pub tgt_lang: usize,
}

impl DecodeConfig {
    pub fn new(tgt_lang: usize) -> Self {
        Self {
            beam_size: 3,
            max_len: 80,
            allowed_vocab: None,
            tgt_lang,
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), DecodeError> {
        if self.beam_size == 0 {
            return Err(DecodeError::InvalidConfig("beam_size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(DecodeError::InvalidConfig("max_len must be at least 1".into()));
        }
        if let Some(allowed) = &self.allowed_vocab {
            if !allowed.contains(&EOS) {
                return Err(DecodeError::MissingEos);
            }
            if let Some(&t) = allowed.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(DecodeError::TokenOutOfRange(t));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Starts with BOS; ends with EOS once finished.
    pub ids: Vec<TokenId>,
    pub score: f64,
    pub finished: bool,
}

/// Decoder output with BOS and EOS stripped.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub ids: Vec<TokenId>,
    pub score: f64,
    pub finished: bool,
}

/// Tokens seen in the corpora plus EOS, without special tokens.
pub fn restrict_vocab(corpora: &[&MonolingualCorpus]) -> BTreeSet<TokenId> {
    let mut set: BTreeSet<TokenId> = corpora
        .iter()
        .flat_map(|c| c.sentences.iter().flatten())
        .copied()
        .filter(|&t| !is_special(t))
        .collect();
    set.insert(EOS);
    set
}

/// Higher score first, then lexicographically smaller ids.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.ids.cmp(&b.ids))
}

/// Log-probabilities of the next token for each live prefix.
fn next_log_probs<T: Float>(
    model: &Seq2SeqModel<T>,
    memory: &ndarray::Array2<T>,
    prefixes: &[&[TokenId]],
    tgt_lang: usize,
    allowed: Option<&[bool]>,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let mut tgt = Packed::default();
    let mut last_rows = Vec::with_capacity(prefixes.len());
    for p in prefixes {
        tgt.push_uniform(p, tgt_lang)?;
        last_rows.push(tgt.len() - 1);
    }
    let cross = CrossLayout {
        key_spans: vec![0..memory.nrows(); prefixes.len()],
        key_valid: None,
    };
    let mut g = Graph::new(model, GroupSet::none());
    let mem = g.tape_mut().constant(memory.clone());
    let hidden = g.decode(mem, &cross, &tgt)?;
    let last = g.tape_mut().select_rows(hidden, &last_rows);
    let logits = g.logits(last);
    let mut logits = g.tape().value(logits).mapv(|v| v.to_f64());
    if let Some(mask) = allowed {
        for mut row in logits.rows_mut() {
            for (v, &ok) in row.iter_mut().zip(mask) {
                if !ok {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
    }
    Ok(log_softmax_rows(logits.view()).rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Beam search without length normalization.
///
/// Finished hypotheses stay in the beam and compete with live ones; search
/// stops when every kept hypothesis is finished or `max_len` tokens have been
/// generated. Sources longer than the model's position table are truncated.
pub fn beam_search<T: Float>(
    model: &Seq2SeqModel<T>,
    input: &[TokenId],
    src_lang: usize,
    cfg: &DecodeConfig,
) -> Result<Decoded, DecodeError> {
    let vocab_size = model.config().vocab_size;
    cfg.validate(vocab_size)?;
    if input.is_empty() {
        return Err(DecodeError::EmptyInput);
    }
    let source = &input[..input.len().min(model.config().max_positions)];
    let memory = model.encode(source, &vec![src_lang; source.len()], None)?;
    let mask: Option<Vec<bool>> = cfg
        .allowed_vocab
        .as_ref()
        .map(|a| (0..vocab_size).map(|t| a.contains(&(t as TokenId))).collect());
    let candidates_ids: Vec<TokenId> = match &mask {
        Some(m) => (0..vocab_size as TokenId).filter(|&t| m[t as usize]).collect(),
        None => (0..vocab_size as TokenId).collect(),
    };
    // The longest decoder input is BOS plus max_len - 1 tokens.
    let max_len = cfg.max_len.min(model.config().max_positions);

    let mut beam = vec![BeamHypothesis {
        ids: vec![BOS],
        score: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        let live: Vec<&BeamHypothesis> = beam.iter().filter(|h| !h.finished).collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<&[TokenId]> = live.iter().map(|h| h.ids.as_slice()).collect();
        let log_probs = next_log_probs(model, &memory, &prefixes, cfg.tgt_lang, mask.as_deref())?;
        let mut pool: Vec<BeamHypothesis> = beam.iter().filter(|h| h.finished).cloned().collect();
        for (h, lp) in live.iter().zip(&log_probs) {
            for &t in &candidates_ids {
                let score = h.score + lp[t as usize];
                if score == f64::NEG_INFINITY {
                    continue;
                }
                let mut ids = h.ids.clone();
                ids.push(t);
                pool.push(BeamHypothesis {
                    ids,
                    score,
                    finished: t == EOS,
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(cfg.beam_size);
        beam = pool;
    }
    let best = beam
        .iter()
        .filter(|h| h.finished)
        .min_by(|a, b| rank(a, b))
        .or_else(|| beam.iter().min_by(|a, b| rank(a, b)))
        .expect("beam is never empty");
    let ids = best.ids[1..]
        .iter()
        .copied()
        .filter(|&t| t != EOS)
        .collect();
    Ok(Decoded {
        ids,
        score: best.score,
        finished: best.finished,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub input: Vec<TokenId>,
    pub src_lang: String,
    pub tgt_lang: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub output: Vec<TokenId>,
    pub score: f64,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DecodeError> {
    Ok(read_jsonl(path)?)
}

pub fn write_outputs(path: &Path, records: &[GenerationRecord]) -> Result<(), DecodeError> {
    Ok(write_jsonl(path, records)?)
}

pub fn read_outputs(path: &Path) -> Result<Vec<GenerationRecord>, DecodeError> {
    Ok(read_jsonl(path)?)
}

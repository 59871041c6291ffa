//! Batch losses for the four pre-training objectives and the downstream task.
//!
//! Every loss is a per-example sum of token negative log-likelihoods,
//! averaged over the examples in the batch.

use crate::autograd::{Float, Var};
use crate::corpus::TaskExample;
use crate::model::{Gradients, Graph, GroupSet, Packed, Seq2SeqModel};
use crate::noising::{MaskedExample, NoisedExample};
use crate::vocab::{TokenId, BOS, EOS};

use super::TrainError;

/// A bilingual pair scored in both translation directions.
#[derive(Clone, Debug, PartialEq)]
pub struct PairExample {
    pub x: Vec<TokenId>,
    pub y: Vec<TokenId>,
    pub x_lang: usize,
    pub y_lang: usize,
}

/// One teacher-forced source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqExample {
    pub source: Vec<TokenId>,
    pub src_lang: usize,
    pub target: Vec<TokenId>,
    pub tgt_lang: usize,
}

impl From<&NoisedExample> for Seq2SeqExample {
    fn from(ex: &NoisedExample) -> Self {
        Self {
            source: ex.source.clone(),
            src_lang: ex.src_lang,
            target: ex.target.clone(),
            tgt_lang: ex.tgt_lang,
        }
    }
}

impl From<&TaskExample> for Seq2SeqExample {
    fn from(ex: &TaskExample) -> Self {
        Self {
            source: ex.input.clone(),
            src_lang: ex.lang.id,
            target: ex.target.clone(),
            tgt_lang: ex.lang.id,
        }
    }
}

impl PairExample {
    pub fn directions(&self) -> [Seq2SeqExample; 2] {
        [
            Seq2SeqExample {
                source: self.x.clone(),
                src_lang: self.x_lang,
                target: self.y.clone(),
                tgt_lang: self.y_lang,
            },
            Seq2SeqExample {
                source: self.y.clone(),
                src_lang: self.y_lang,
                target: self.x.clone(),
                tgt_lang: self.x_lang,
            },
        ]
    }

    pub fn swapped(&self) -> Self {
        Self {
            x: self.y.clone(),
            y: self.x.clone(),
            x_lang: self.y_lang,
            y_lang: self.x_lang,
        }
    }
}

/// A homogeneous batch for one objective.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// Masked prediction, monolingual or over a concatenated pair.
    Masked(Vec<MaskedExample>),
    Denoise(Vec<NoisedExample>),
    Translate(Vec<PairExample>),
    Task(Vec<TaskExample>),
}

impl Batch {
    pub fn len(&self) -> usize {
        match self {
            Batch::Masked(b) => b.len(),
            Batch::Denoise(b) => b.len(),
            Batch::Translate(b) => b.len(),
            Batch::Task(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Positions that contribute a log-likelihood term.
    pub fn scored_positions(&self) -> usize {
        match self {
            Batch::Masked(b) => b.iter().map(|e| e.mask_positions.len()).sum(),
            Batch::Denoise(b) => b.iter().map(|e| e.target.len() + 1).sum(),
            Batch::Translate(b) => b.iter().map(|e| e.x.len() + e.y.len() + 2).sum(),
            Batch::Task(b) => b.iter().map(|e| e.target.len() + 1).sum(),
        }
    }
}

fn masked_loss<T: Float>(g: &mut Graph<'_, T>, batch: &[MaskedExample], scale: f64) -> Result<Var, TrainError> {
    let mut packed = Packed::default();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for ex in batch {
        if ex.mask_positions.is_empty() {
            return Err(TrainError::EmptyMask);
        }
        let offset = packed.len();
        packed.push_segmented(&ex.corrupted, &ex.lang_tags)?;
        rows.extend(ex.mask_positions.iter().map(|&p| offset + p));
        targets.extend(ex.targets.iter().map(|&t| t as usize));
    }
    let states = g.encode(&packed)?;
    let picked = g.tape_mut().select_rows(states, &rows);
    let logits = g.logits(picked);
    let weights = vec![T::of(scale); targets.len()];
    Ok(g.tape_mut().cross_entropy(logits, &targets, &weights))
}

fn seq2seq_loss<T: Float>(g: &mut Graph<'_, T>, batch: &[Seq2SeqExample], scale: f64) -> Result<Var, TrainError> {
    let mut src = Packed::default();
    let mut tgt = Packed::default();
    let mut labels = Vec::new();
    for ex in batch {
        if ex.source.is_empty() || ex.target.is_empty() {
            return Err(TrainError::EmptySequence);
        }
        src.push_uniform(&ex.source, ex.src_lang)?;
        let mut input = Vec::with_capacity(ex.target.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&ex.target);
        tgt.push_uniform(&input, ex.tgt_lang)?;
        labels.extend(ex.target.iter().map(|&t| t as usize));
        labels.push(EOS as usize);
    }
    let memory = g.encode(&src)?;
    let hidden = g.decode(memory, &src.as_memory(), &tgt)?;
    let logits = g.logits(hidden);
    let weights = vec![T::of(scale); labels.len()];
    Ok(g.tape_mut().cross_entropy(logits, &labels, &weights))
}

/// Build the batch loss, scaled by `weight`, on `g`.
pub fn batch_loss<T: Float>(g: &mut Graph<'_, T>, batch: &Batch, weight: f64) -> Result<Var, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let scale = weight / batch.len() as f64;
    match batch {
        Batch::Masked(b) => masked_loss(g, b, scale),
        Batch::Denoise(b) => {
            let ex: Vec<Seq2SeqExample> = b.iter().map(Into::into).collect();
            seq2seq_loss(g, &ex, scale)
        }
        Batch::Translate(b) => {
            let ex: Vec<Seq2SeqExample> = b.iter().flat_map(|p| p.directions()).collect();
            seq2seq_loss(g, &ex, scale)
        }
        Batch::Task(b) => {
            let ex: Vec<Seq2SeqExample> = b.iter().map(Into::into).collect();
            seq2seq_loss(g, &ex, scale)
        }
    }
}

/// Loss value without gradients.
pub fn loss_value<T: Float>(model: &Seq2SeqModel<T>, batch: &Batch, weight: f64) -> Result<f64, TrainError> {
    let mut g = Graph::new(model, GroupSet::none());
    let loss = batch_loss(&mut g, batch, weight)?;
    Ok(g.tape().value(loss)[[0, 0]].to_f64())
}

/// Loss value and gradients for the `trainable` groups.
pub fn loss_and_grads<T: Float>(
    model: &Seq2SeqModel<T>,
    batch: &Batch,
    weight: f64,
    trainable: GroupSet,
) -> Result<(f64, Gradients<T>), TrainError> {
    let mut g = Graph::new(model, trainable);
    let loss = batch_loss(&mut g, batch, weight)?;
    let value = g.tape().value(loss)[[0, 0]].to_f64();
    Ok((value, g.gradients(loss)))
}

/// Masked-LM loss over monolingual examples, with gradients for every group.
pub fn loss_mlm<T: Float>(
    model: &Seq2SeqModel<T>,
    batch: &[MaskedExample],
) -> Result<(f64, Gradients<T>), TrainError> {
    loss_and_grads(model, &Batch::Masked(batch.to_vec()), 1.0, GroupSet::all())
}

/// Masked-LM loss over concatenated bilingual pairs.
pub fn loss_xmlm<T: Float>(
    model: &Seq2SeqModel<T>,
    batch: &[MaskedExample],
) -> Result<(f64, Gradients<T>), TrainError> {
    loss_and_grads(model, &Batch::Masked(batch.to_vec()), 1.0, GroupSet::all())
}

/// Reconstruction loss of pristine sentences from noised ones.
pub fn loss_dae<T: Float>(
    model: &Seq2SeqModel<T>,
    batch: &[NoisedExample],
) -> Result<(f64, Gradients<T>), TrainError> {
    loss_and_grads(model, &Batch::Denoise(batch.to_vec()), 1.0, GroupSet::all())
}

/// Translation loss in both directions of each pair.
pub fn loss_xae<T: Float>(
    model: &Seq2SeqModel<T>,
    batch: &[PairExample],
) -> Result<(f64, Gradients<T>), TrainError> {
    loss_and_grads(model, &Batch::Translate(batch.to_vec()), 1.0, GroupSet::all())
}

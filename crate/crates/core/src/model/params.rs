use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autograd::Float;

/// Disjoint partition of the model parameters used for freeze control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    WordEmbeddings,
    EncoderLayers,
    DecoderLayers,
    OutputHead,
    TagAndPositionEmbeddings,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::WordEmbeddings,
        ParamGroup::EncoderLayers,
        ParamGroup::DecoderLayers,
        ParamGroup::OutputHead,
        ParamGroup::TagAndPositionEmbeddings,
    ];

    fn bit(self) -> u8 {
        1 << self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::WordEmbeddings => "word_embeddings",
            ParamGroup::EncoderLayers => "encoder_layers",
            ParamGroup::DecoderLayers => "decoder_layers",
            ParamGroup::OutputHead => "output_head",
            ParamGroup::TagAndPositionEmbeddings => "tag_and_position_embeddings",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of parameter groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct GroupSet(u8);

impl GroupSet {
    pub fn none() -> Self {
        Self(0)
    }

    pub fn all() -> Self {
        Self::of(&ParamGroup::ALL)
    }

    pub fn of(groups: &[ParamGroup]) -> Self {
        Self(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, g: ParamGroup) -> bool {
        self.0 & g.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn groups(self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .into_iter()
            .filter(|&g| self.contains(g))
            .collect()
    }

    pub fn complement(self) -> Self {
        Self(!self.0 & Self::all().0)
    }
}

impl FromIterator<ParamGroup> for GroupSet {
    fn from_iter<I: IntoIterator<Item = ParamGroup>>(iter: I) -> Self {
        Self(iter.into_iter().fold(0, |acc, g| acc | g.bit()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<T>,
}

/// Per-parameter gradients, aligned with the model's parameter list.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T: Float> Gradients<T> {
    pub(crate) fn from_vec(grads: Vec<Option<Array2<T>>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }
}

//! Objectives, optimizer and the staged training loops.

mod loss;
mod optim;

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Float;
use crate::corpus::{MonolingualCorpus, ParallelCorpus, TaskExample};
use crate::model::{GroupSet, ModelError, ParamGroup, Seq2SeqModel};
use crate::noising::{build_xmlm, mask_mlm, noise_dae, NoiseConfig, NoiseError};
use crate::rng;

pub use loss::{
    batch_loss, loss_and_grads, loss_dae, loss_mlm, loss_value, loss_xae, loss_xmlm, Batch, PairExample,
    Seq2SeqExample,
};
pub use optim::{adam_step, lr_at, OptimizerConfig, OptimizerState};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error("masked example without masked positions")]
    EmptyMask,
    #[error("empty source or target sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("no training data for {0}")]
    NoData(Objective),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Hook(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Mlm,
    Xmlm,
    Dae,
    Xae,
    Task,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::Mlm => "mlm",
            Objective::Xmlm => "xmlm",
            Objective::Dae => "dae",
            Objective::Xae => "xae",
            Objective::Task => "task",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveWeights {
    pub mlm: f64,
    pub xmlm: f64,
    pub dae: f64,
    pub xae: f64,
}

impl ObjectiveWeights {
    fn get(&self, o: Objective) -> f64 {
        match o {
            Objective::Mlm => self.mlm,
            Objective::Xmlm => self.xmlm,
            Objective::Dae => self.dae,
            Objective::Xae => self.xae,
            Objective::Task => 1.0,
        }
    }
}

/// Which groups a stage trains and how its objectives are weighted.
#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub trainable: GroupSet,
    pub weights: ObjectiveWeights,
}

const ENCODER_SIDE: [ParamGroup; 3] = [
    ParamGroup::EncoderLayers,
    ParamGroup::WordEmbeddings,
    ParamGroup::TagAndPositionEmbeddings,
];

impl StagePlan {
    pub fn stage_one() -> Self {
        Self {
            stage: Stage::One,
            trainable: GroupSet::of(&[
                ParamGroup::EncoderLayers,
                ParamGroup::WordEmbeddings,
                ParamGroup::TagAndPositionEmbeddings,
                ParamGroup::OutputHead,
            ]),
            weights: ObjectiveWeights {
                mlm: 1.0,
                xmlm: 1.0,
                dae: 0.0,
                xae: 0.0,
            },
        }
    }

    pub fn stage_two() -> Self {
        Self {
            stage: Stage::Two,
            trainable: GroupSet::of(&[ParamGroup::DecoderLayers]),
            weights: ObjectiveWeights {
                mlm: 0.0,
                xmlm: 0.0,
                dae: 0.5,
                xae: 1.0,
            },
        }
    }

    /// Objectives of this stage with positive weight, in alternation order.
    pub fn schedule(&self) -> Vec<(Objective, f64)> {
        let candidates = match self.stage {
            Stage::One => [Objective::Mlm, Objective::Xmlm],
            Stage::Two => [Objective::Dae, Objective::Xae],
        };
        candidates
            .into_iter()
            .map(|o| (o, self.weights.get(o)))
            .filter(|&(_, w)| w > 0.0)
            .collect()
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        let w = &self.weights;
        if [w.mlm, w.xmlm, w.dae, w.xae].iter().any(|&x| !(x.is_finite() && x >= 0.0)) {
            return bad("objective weights must be finite and non-negative".into());
        }
        let (foreign, forbidden): (&[f64], &[ParamGroup]) = match self.stage {
            Stage::One => (&[w.dae, w.xae], &[ParamGroup::DecoderLayers]),
            Stage::Two => (&[w.mlm, w.xmlm], &ENCODER_SIDE),
        };
        if foreign.iter().any(|&x| x != 0.0) {
            return bad(format!("{:?} only trains its own objectives", self.stage));
        }
        if let Some(g) = forbidden.iter().find(|&&g| self.trainable.contains(g)) {
            return bad(format!("{:?} must keep {g} frozen", self.stage));
        }
        if self.schedule().is_empty() {
            return bad("every objective of the stage has weight zero".into());
        }
        Ok(())
    }
}

/// Fine-tuning strategies, named by what they train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    All,
    Enc,
    Dec,
    #[serde(rename = "et")]
    EncoderLayers,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::All, Strategy::Enc, Strategy::Dec, Strategy::EncoderLayers];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::All => "all",
            Strategy::Enc => "enc",
            Strategy::Dec => "dec",
            Strategy::EncoderLayers => "et",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn trainable(self) -> GroupSet {
        match self {
            Strategy::All => GroupSet::all(),
            Strategy::Enc => GroupSet::of(&ENCODER_SIDE),
            Strategy::Dec => GroupSet::of(&[ParamGroup::DecoderLayers, ParamGroup::OutputHead]),
            Strategy::EncoderLayers => GroupSet::of(&[ParamGroup::EncoderLayers]),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl TrainSettings {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        self.optimizer.validate()?;
        self.noise.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub objective: Objective,
    /// Weighted batch loss, as optimized.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,objective,loss,lr\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.objective, r.loss, r.lr));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_csv().as_bytes())?;
        Ok(())
    }

    /// Mean loss of `objective` over rows with index in `range`.
    pub fn mean(&self, objective: Objective, range: std::ops::Range<usize>) -> Option<f64> {
        let end = range.end.min(self.rows.len());
        let values: Vec<f64> = self.rows[range.start.min(end)..end]
            .iter()
            .filter(|r| r.objective == objective)
            .map(|r| r.loss)
            .collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Called every `every` steps and after the last step with the step number.
pub struct CheckpointHook<'a, T> {
    pub every: usize,
    pub callback: &'a mut dyn FnMut(usize, &Seq2SeqModel<T>) -> Result<(), TrainError>,
}

fn run_loop<T: Float>(
    model: &mut Seq2SeqModel<T>,
    schedule: &[(Objective, f64)],
    trainable: GroupSet,
    settings: &TrainSettings,
    stream: &str,
    mut sample: impl FnMut(Objective, &mut rng::StreamRng) -> Result<Batch, TrainError>,
    mut hook: Option<CheckpointHook<'_, T>>,
) -> Result<LossTrace, TrainError> {
    settings.validate()?;
    let mut rng = rng::stream(settings.seed, stream);
    let mut state = OptimizerState::new(model, settings.optimizer.clone())?;
    let mut trace = LossTrace::default();
    let total = settings.optimizer.total_steps;
    for step in 0..total {
        let (objective, weight) = schedule[step % schedule.len()];
        let batch = sample(objective, &mut rng)?;
        let (loss, grads) = loss_and_grads(model, &batch, weight, trainable)?;
        let lr = adam_step(model, &grads, &mut state, trainable)?;
        trace.rows.push(TraceRow {
            step: step + 1,
            objective,
            loss,
            lr,
        });
        if let Some(h) = hook.as_mut() {
            if (h.every > 0 && (step + 1) % h.every == 0) || step + 1 == total {
                (h.callback)(step + 1, model)?;
            }
        }
    }
    Ok(trace)
}

fn pick<'c>(rng: &mut impl Rng, corpora: &'c [MonolingualCorpus]) -> (&'c [u32], usize) {
    let total: usize = corpora.iter().map(|c| c.sentences.len()).sum();
    let mut i = rng.gen_range(0..total);
    for c in corpora {
        if i < c.sentences.len() {
            return (&c.sentences[i], c.lang.id);
        }
        i -= c.sentences.len();
    }
    unreachable!("index within total")
}

fn pick_pair(rng: &mut impl Rng, corpora: &[ParallelCorpus]) -> PairExample {
    let total: usize = corpora.iter().map(|c| c.pairs.len()).sum();
    let mut i = rng.gen_range(0..total);
    for c in corpora {
        if i < c.pairs.len() {
            let (x, y) = &c.pairs[i];
            return PairExample {
                x: x.clone(),
                y: y.clone(),
                x_lang: c.src_lang.id,
                y_lang: c.tgt_lang.id,
            };
        }
        i -= c.pairs.len();
    }
    unreachable!("index within total")
}

fn check_data(schedule: &[(Objective, f64)], mono: &[MonolingualCorpus], parallel: &[ParallelCorpus]) -> Result<(), TrainError> {
    let has_mono = mono.iter().any(|c| !c.sentences.is_empty());
    let has_parallel = parallel.iter().any(|c| !c.pairs.is_empty());
    for &(o, _) in schedule {
        let ok = match o {
            Objective::Mlm | Objective::Dae => has_mono,
            Objective::Xmlm | Objective::Xae => has_parallel,
            Objective::Task => true,
        };
        if !ok {
            return Err(TrainError::NoData(o));
        }
    }
    Ok(())
}

fn pretrain<T: Float>(
    model: &mut Seq2SeqModel<T>,
    mono: &[MonolingualCorpus],
    parallel: &[ParallelCorpus],
    plan: &StagePlan,
    settings: &TrainSettings,
    hook: Option<CheckpointHook<'_, T>>,
) -> Result<LossTrace, TrainError> {
    plan.validate()?;
    let schedule = plan.schedule();
    check_data(&schedule, mono, parallel)?;
    let vocab_size = model.config().vocab_size;
    let noise = settings.noise.clone();
    let bs = settings.batch_size;
    let stream = match plan.stage {
        Stage::One => "stage1",
        Stage::Two => "stage2",
    };
    let sample = |objective: Objective, rng: &mut rng::StreamRng| -> Result<Batch, TrainError> {
        Ok(match objective {
            Objective::Mlm => Batch::Masked(
                (0..bs)
                    .map(|_| {
                        let (s, lang) = pick(rng, mono);
                        mask_mlm(s, lang, vocab_size, &noise, rng)
                    })
                    .collect::<Result<_, _>>()?,
            ),
            Objective::Xmlm => Batch::Masked(
                (0..bs)
                    .map(|_| {
                        let mut p = pick_pair(rng, parallel);
                        if rng.gen_bool(0.5) {
                            p = p.swapped();
                        }
                        build_xmlm(&p.x, &p.y, p.x_lang, p.y_lang, vocab_size, &noise, rng)
                    })
                    .collect::<Result<_, _>>()?,
            ),
            Objective::Dae => Batch::Denoise(
                (0..bs)
                    .map(|_| {
                        let (s, lang) = pick(rng, mono);
                        noise_dae(s, lang, &noise, rng)
                    })
                    .collect::<Result<_, _>>()?,
            ),
            Objective::Xae => Batch::Translate((0..bs).map(|_| pick_pair(rng, parallel)).collect()),
            Objective::Task => unreachable!("not a pre-training objective"),
        })
    };
    run_loop(model, &schedule, plan.trainable, settings, stream, sample, hook)
}

/// Train the encoding side with masked prediction, leaving the decoder untouched.
pub fn pretrain_stage1<T: Float>(
    model: &mut Seq2SeqModel<T>,
    mono: &[MonolingualCorpus],
    parallel: &[ParallelCorpus],
    plan: &StagePlan,
    settings: &TrainSettings,
    hook: Option<CheckpointHook<'_, T>>,
) -> Result<LossTrace, TrainError> {
    if plan.stage != Stage::One {
        return Err(TrainError::InvalidConfig("stage-one training needs a stage-one plan".into()));
    }
    pretrain(model, mono, parallel, plan, settings, hook)
}

/// Train the decoder with denoising and translation, leaving the encoder untouched.
pub fn pretrain_stage2<T: Float>(
    model: &mut Seq2SeqModel<T>,
    mono: &[MonolingualCorpus],
    parallel: &[ParallelCorpus],
    plan: &StagePlan,
    settings: &TrainSettings,
    hook: Option<CheckpointHook<'_, T>>,
) -> Result<LossTrace, TrainError> {
    if plan.stage != Stage::Two {
        return Err(TrainError::InvalidConfig("stage-two training needs a stage-two plan".into()));
    }
    pretrain(model, mono, parallel, plan, settings, hook)
}

/// Supervised training on a task dataset with the strategy's groups unfrozen.
pub fn finetune<T: Float>(
    model: &mut Seq2SeqModel<T>,
    dataset: &[TaskExample],
    strategy: Strategy,
    settings: &TrainSettings,
    hook: Option<CheckpointHook<'_, T>>,
) -> Result<LossTrace, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::NoData(Objective::Task));
    }
    let bs = settings.batch_size;
    let sample = |_: Objective, rng: &mut rng::StreamRng| -> Result<Batch, TrainError> {
        Ok(Batch::Task(
            (0..bs)
                .map(|_| dataset[rng.gen_range(0..dataset.len())].clone())
                .collect(),
        ))
    };
    run_loop(
        model,
        &[(Objective::Task, 1.0)],
        strategy.trainable(),
        settings,
        "finetune",
        sample,
        hook,
    )
}

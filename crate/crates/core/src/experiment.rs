//! End-to-end experiment pipeline on twin languages.
//!
//! Pre-trains the toy model, fine-tunes it on the language-A task and scores
//! generation in both languages. Used by the ablation command and by the
//! transfer experiments.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{make_task_dataset, CorpusError, SynthConfig, TaskExample, TwinLanguages};
use crate::evaluation::{evaluate, lang_membership, MetricError, MetricReport};
use crate::generation::{beam_search, DecodeConfig, DecodeError};
use crate::model::{Activation, ModelConfig, ModelError, Seq2SeqModel};
use crate::noising::NoiseConfig;
use crate::rng;
use crate::training::{
    finetune, pretrain_stage1, pretrain_stage2, OptimizerConfig, StagePlan, Strategy, TrainError,
    TrainSettings,
};
use crate::vocab::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub steps: usize,
    pub lr: f64,
    pub warmup: usize,
}

impl PhaseConfig {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: self.lr,
            warmup_steps: self.warmup,
            ..OptimizerConfig::pretrain(self.steps)
        }
    }
}

/// Model hyperparameters that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_positions: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            enc_layers: 2,
            dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            max_positions: 64,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, num_languages: usize) -> ModelConfig {
        ModelConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ffn: self.d_ffn,
            max_positions: self.max_positions,
            vocab_size,
            num_languages,
            activation: Activation::Gelu,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelShape,
    pub noise: NoiseConfig,
    pub batch_size: usize,
    pub stage1: PhaseConfig,
    pub stage2: PhaseConfig,
    pub finetune: PhaseConfig,
    /// Language-A task examples used for fine-tuning.
    pub task_train: usize,
    /// Held-out task examples per language.
    pub task_eval: usize,
    /// Sentences decoded with the flipped tag to measure controllability.
    pub probe_size: usize,
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            model: ModelShape::default(),
            noise: NoiseConfig::default(),
            batch_size: 16,
            stage1: PhaseConfig {
                steps: 5000,
                lr: 2e-3,
                warmup: 300,
            },
            stage2: PhaseConfig {
                steps: 3000,
                lr: 2e-3,
                warmup: 300,
            },
            finetune: PhaseConfig {
                steps: 3000,
                lr: 1e-3,
                warmup: 150,
            },
            task_train: 1000,
            task_eval: 200,
            probe_size: 200,
            beam_size: 3,
            max_len: 16,
        }
    }
}

impl ExperimentConfig {
    /// Copy with every seed derived from `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c.synth.seed = seed;
        c
    }

    /// Training settings for one phase, seeded from the named stream.
    pub fn settings(&self, phase: &PhaseConfig, stream: &str) -> TrainSettings {
        TrainSettings {
            batch_size: self.batch_size,
            optimizer: phase.optimizer(),
            noise: self.noise.clone(),
            seed: rng::stream_seed(self.seed, stream),
        }
    }

    pub fn decode_config(&self, tgt_lang: usize, allowed_vocab: Option<BTreeSet<TokenId>>) -> DecodeConfig {
        DecodeConfig {
            beam_size: self.beam_size,
            max_len: self.max_len,
            allowed_vocab,
            tgt_lang,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.synth.validate()?;
        self.noise.validate().map_err(TrainError::from)?;
        for (name, phase) in [("stage1", &self.stage1), ("stage2", &self.stage2), ("finetune", &self.finetune)] {
            phase
                .optimizer()
                .validate()
                .map_err(|e| ExperimentError::InvalidConfig(format!("{name}: {e}")))?;
        }
        if self.batch_size == 0 || self.beam_size == 0 || self.max_len == 0 {
            return Err(ExperimentError::InvalidConfig(
                "batch_size, beam_size and max_len must be positive".into(),
            ));
        }
        self.model.config(7, 2).validate()?;
        Ok(())
    }
}

/// Pre-training variants compared in the objective ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoXae,
    NoDae,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoXae, Variant::NoDae];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoXae => "no_xae",
            Variant::NoDae => "no_dae",
        }
    }

    pub fn stage_two_plan(self) -> StagePlan {
        let mut plan = StagePlan::stage_two();
        match self {
            Variant::Full => {}
            Variant::NoXae => plan.weights.xae = 0.0,
            Variant::NoDae => plan.weights.dae = 0.0,
        }
        plan
    }
}

/// Generated languages and the task splits derived from them.
pub struct Prepared {
    pub twin: TwinLanguages,
    pub task_a_train: Vec<TaskExample>,
    pub task_a_eval: Vec<TaskExample>,
    /// Language-B training examples, drawn disjoint from the evaluation split.
    pub task_b_pool: Vec<TaskExample>,
    pub task_b_eval: Vec<TaskExample>,
    pub lexicon_a: BTreeSet<TokenId>,
    pub lexicon_b: BTreeSet<TokenId>,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let twin = TwinLanguages::generate(&cfg.synth)?;
    let split = |lang: usize, n_train: usize| -> Result<(Vec<TaskExample>, Vec<TaskExample>), ExperimentError> {
        let corpus = if lang == 0 { &twin.mono_a } else { &twin.mono_b };
        let mut all = make_task_dataset(corpus, twin.marker(lang), cfg.task_eval + n_train, cfg.seed)?;
        let train = all.split_off(cfg.task_eval);
        Ok((train, all))
    };
    let (task_a_train, task_a_eval) = split(0, cfg.task_train)?;
    let (task_b_pool, task_b_eval) = split(1, cfg.task_train)?;
    let lexicon_a = twin.lexicon(0).iter().copied().collect();
    let lexicon_b = twin.lexicon(1).iter().copied().collect();
    Ok(Prepared {
        twin,
        task_a_train,
        task_a_eval,
        task_b_pool,
        task_b_eval,
        lexicon_a,
        lexicon_b,
    })
}

pub fn new_model(
    cfg: &ExperimentConfig,
    vocab_size: usize,
    num_languages: usize,
) -> Result<Seq2SeqModel<f32>, ExperimentError> {
    let mc = cfg.model.config(vocab_size, num_languages);
    Ok(Seq2SeqModel::new(mc, &mut rng::stream(cfg.seed, "init"))?)
}

pub fn init_model(cfg: &ExperimentConfig, data: &Prepared) -> Result<Seq2SeqModel<f32>, ExperimentError> {
    new_model(cfg, data.twin.vocab.len(), data.twin.languages.len())
}

pub fn run_stage1(
    cfg: &ExperimentConfig,
    data: &Prepared,
    model: &mut Seq2SeqModel<f32>,
) -> Result<crate::training::LossTrace, ExperimentError> {
    let twin = &data.twin;
    Ok(pretrain_stage1(
        model,
        &[twin.mono_a.clone(), twin.mono_b.clone()],
        &[twin.parallel.clone()],
        &StagePlan::stage_one(),
        &cfg.settings(&cfg.stage1, "stage1"),
        None,
    )?)
}

pub fn run_stage2(
    cfg: &ExperimentConfig,
    data: &Prepared,
    model: &mut Seq2SeqModel<f32>,
    variant: Variant,
) -> Result<crate::training::LossTrace, ExperimentError> {
    let twin = &data.twin;
    Ok(pretrain_stage2(
        model,
        &[twin.mono_a.clone(), twin.mono_b.clone()],
        &[twin.parallel.clone()],
        &variant.stage_two_plan(),
        &cfg.settings(&cfg.stage2, "stage2"),
        None,
    )?)
}

/// Stage-one model plus one stage-two model per variant, sharing stage one.
pub struct Pretrained {
    pub stage1: Seq2SeqModel<f32>,
    pub variants: Vec<(Variant, Seq2SeqModel<f32>)>,
}

impl Pretrained {
    pub fn get(&self, v: Variant) -> Option<&Seq2SeqModel<f32>> {
        self.variants.iter().find(|(w, _)| *w == v).map(|(_, m)| m)
    }
}

pub fn pretrain_variants(
    cfg: &ExperimentConfig,
    data: &Prepared,
    variants: &[Variant],
) -> Result<Pretrained, ExperimentError> {
    let mut stage1 = init_model(cfg, data)?;
    run_stage1(cfg, data, &mut stage1)?;
    let variants = variants
        .iter()
        .map(|&v| {
            let mut m = stage1.clone();
            run_stage2(cfg, data, &mut m, v)?;
            Ok((v, m))
        })
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    Ok(Pretrained { stage1, variants })
}

/// Fine-tune a copy of `model` on task examples.
pub fn finetune_copy(
    cfg: &ExperimentConfig,
    model: &Seq2SeqModel<f32>,
    examples: &[TaskExample],
    strategy: Strategy,
    stream: &str,
) -> Result<Seq2SeqModel<f32>, ExperimentError> {
    let mut m = model.clone();
    finetune(&mut m, examples, strategy, &cfg.settings(&cfg.finetune, stream), None)?;
    Ok(m)
}

fn decode_config(cfg: &ExperimentConfig, tgt_lang: usize) -> DecodeConfig {
    cfg.decode_config(tgt_lang, None)
}

/// Decode each task input in its own language and score against the targets.
pub fn evaluate_task(
    cfg: &ExperimentConfig,
    model: &Seq2SeqModel<f32>,
    examples: &[TaskExample],
    lexicon: &BTreeSet<TokenId>,
) -> Result<MetricReport, ExperimentError> {
    let mut hyps = Vec::with_capacity(examples.len());
    for ex in examples {
        let out = beam_search(model, &ex.input, ex.lang.id, &decode_config(cfg, ex.lang.id))?;
        hyps.push(out.ids);
    }
    let refs: Vec<Vec<TokenId>> = examples.iter().map(|e| e.target.clone()).collect();
    Ok(evaluate(&hyps, &refs, lexicon)?)
}

/// Language-B membership of outputs for language-A inputs decoded with the B tag.
pub fn flipped_tag_membership(
    cfg: &ExperimentConfig,
    model: &Seq2SeqModel<f32>,
    data: &Prepared,
) -> Result<f64, ExperimentError> {
    let a = data.twin.lang_a().id;
    let b = data.twin.lang_b().id;
    let mut outputs = Vec::with_capacity(cfg.probe_size);
    for s in data.twin.mono_a.sentences.iter().take(cfg.probe_size) {
        outputs.push(beam_search(model, s, a, &decode_config(cfg, b))?.ids);
    }
    Ok(lang_membership(&outputs, &data.lexicon_b).fraction)
}

/// Scores of one pre-trained variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub variant: Variant,
    pub flipped_tag_membership: f64,
    /// Language-A task, after fine-tuning on it.
    pub supervised: MetricReport,
    /// Language-B task, zero-shot.
    pub zero_shot: MetricReport,
}

/// Pre-training objective ablation with encoder-layer fine-tuning on language A.
pub fn objective_ablation(
    cfg: &ExperimentConfig,
    data: &Prepared,
    pretrained: &Pretrained,
) -> Result<Vec<VariantScores>, ExperimentError> {
    pretrained
        .variants
        .iter()
        .map(|(v, m)| {
            let tuned = finetune_copy(cfg, m, &data.task_a_train, Strategy::EncoderLayers, "finetune.a")?;
            Ok(VariantScores {
                variant: *v,
                flipped_tag_membership: flipped_tag_membership(cfg, m, data)?,
                supervised: evaluate_task(cfg, &tuned, &data.task_a_eval, &data.lexicon_a)?,
                zero_shot: evaluate_task(cfg, &tuned, &data.task_b_eval, &data.lexicon_b)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyScores {
    pub strategy: Strategy,
    pub supervised: MetricReport,
    pub zero_shot: MetricReport,
}

/// Fine-tuning strategy comparison on the fully pre-trained model.
pub fn strategy_comparison(
    cfg: &ExperimentConfig,
    data: &Prepared,
    model: &Seq2SeqModel<f32>,
    strategies: &[Strategy],
) -> Result<Vec<StrategyScores>, ExperimentError> {
    strategies
        .iter()
        .map(|&s| {
            let tuned = finetune_copy(cfg, model, &data.task_a_train, s, "finetune.a")?;
            Ok(StrategyScores {
                strategy: s,
                supervised: evaluate_task(cfg, &tuned, &data.task_a_eval, &data.lexicon_a)?,
                zero_shot: evaluate_task(cfg, &tuned, &data.task_b_eval, &data.lexicon_b)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FewShotPoint {
    pub b_examples: usize,
    /// Fine-tuned on language A, then on the language-B sample.
    pub with_transfer: MetricReport,
    /// Fine-tuned on the language-B sample only.
    pub b_only: MetricReport,
}

/// Few-shot language-B fine-tuning with and without a preceding language-A stage.
pub fn few_shot(
    cfg: &ExperimentConfig,
    data: &Prepared,
    model: &Seq2SeqModel<f32>,
    sizes: &[usize],
    strategy: Strategy,
) -> Result<Vec<FewShotPoint>, ExperimentError> {
    if let Some(&n) = sizes.iter().find(|&&n| n > data.task_b_pool.len()) {
        return Err(ExperimentError::InvalidConfig(format!(
            "{n} language-B examples requested, pool has {}",
            data.task_b_pool.len()
        )));
    }
    let after_a = finetune_copy(cfg, model, &data.task_a_train, strategy, "finetune.a")?;
    sizes
        .iter()
        .map(|&n| {
            let sample = &data.task_b_pool[..n];
            let transfer = finetune_copy(cfg, &after_a, sample, strategy, "finetune.b")?;
            let direct = finetune_copy(cfg, model, sample, strategy, "finetune.b")?;
            Ok(FewShotPoint {
                b_examples: n,
                with_transfer: evaluate_task(cfg, &transfer, &data.task_b_eval, &data.lexicon_b)?,
                b_only: evaluate_task(cfg, &direct, &data.task_b_eval, &data.lexicon_b)?,
            })
        })
        .collect()
}

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Deserialize;
use serde_json::json;
use xling_core::corpus::{
    load_tasks, read_jsonl, save_tasks, write_jsonl, MonolingualCorpus, ParallelCorpus, LANG_A, LANG_B,
};
use xling_core::evaluation::{evaluate as score, BLEU_SMOOTHING};
use xling_core::experiment::{
    new_model, objective_ablation, pretrain_variants, prepare, strategy_comparison, ExperimentConfig,
    Variant,
};
use xling_core::generation::{beam_search, read_manifest, restrict_vocab, write_outputs, GenerationRecord, ManifestEntry};
use xling_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, GroupSet, Seq2SeqModel};
use xling_core::training::{self, StagePlan, Strategy, TrainSettings};
use xling_core::vocab::{learn_vocab, BaseUnit, LanguageSet, TokenId, Vocab};

use crate::config::RunConfig;
use crate::{AblationKind, Common, Failure, VariantArg};

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    Ok(RunConfig::load(common.config.as_deref(), &common.set)
        .map_err(Failure::usage)?
        .with_seed(common.seed))
}

/// Refuse to overwrite existing outputs unless `--force` was given.
fn check_outputs(common: &Common, paths: &[&Path]) -> CmdResult {
    if common.force {
        return Ok(());
    }
    let existing: Vec<String> = paths
        .iter()
        .filter(|p| p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !existing.is_empty() {
        return Err(Failure::usage(anyhow!(
            "refusing to overwrite {} (pass --force)",
            existing.join(", ")
        )));
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn twin_languages() -> LanguageSet {
    LanguageSet::new([LANG_A, LANG_B]).expect("distinct language names")
}

struct DataDir {
    root: PathBuf,
}

impl DataDir {
    const VOCAB: &'static str = "vocab.txt";
    const MONO_A: &'static str = "mono_a.jsonl";
    const MONO_B: &'static str = "mono_b.jsonl";
    const PARALLEL: &'static str = "parallel.jsonl";

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn vocab(&self) -> anyhow::Result<Vocab> {
        let p = self.path(Self::VOCAB);
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Vocab::from_text(&text).with_context(|| p.display().to_string())
    }

    fn corpora(&self, langs: &LanguageSet) -> anyhow::Result<(Vec<MonolingualCorpus>, Vec<ParallelCorpus>)> {
        let tags: Vec<_> = langs.iter().collect();
        let [a, b] = tags[..] else {
            anyhow::bail!("expected two languages, found {}", tags.len());
        };
        let load_mono = |name: &str, lang| {
            let p = self.path(name);
            MonolingualCorpus::load_jsonl(&p, lang).with_context(|| p.display().to_string())
        };
        let p = self.path(Self::PARALLEL);
        let parallel = ParallelCorpus::load_jsonl(&p, a, b).with_context(|| p.display().to_string())?;
        Ok((vec![load_mono(Self::MONO_A, a)?, load_mono(Self::MONO_B, b)?], vec![parallel]))
    }
}

fn render(vocab: &Vocab, sentences: &[Vec<TokenId>]) -> anyhow::Result<String> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&vocab.decode(s)?.join(" "));
        out.push('\n');
    }
    Ok(out)
}

pub fn gen_data(common: &Common, out: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    let dir = DataDir { root: out.to_path_buf() };
    let names = [
        DataDir::VOCAB,
        DataDir::MONO_A,
        DataDir::MONO_B,
        DataDir::PARALLEL,
        "mono_a.txt",
        "mono_b.txt",
        "task_a_train.jsonl",
        "task_a_eval.jsonl",
        "task_b_train.jsonl",
        "task_b_eval.jsonl",
        "task_a_eval.manifest.jsonl",
        "task_b_eval.manifest.jsonl",
    ];
    let paths: Vec<PathBuf> = names.iter().map(|n| dir.path(n)).collect();
    check_outputs(common, &paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let data = prepare(&cfg.experiment)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let twin = &data.twin;
    fs::write(dir.path(DataDir::VOCAB), twin.vocab.to_text()).context("writing vocabulary")?;
    twin.mono_a.save_jsonl(&dir.path(DataDir::MONO_A))?;
    twin.mono_b.save_jsonl(&dir.path(DataDir::MONO_B))?;
    twin.parallel.save_jsonl(&dir.path(DataDir::PARALLEL))?;
    fs::write(dir.path("mono_a.txt"), render(&twin.vocab, &twin.mono_a.sentences)?)?;
    fs::write(dir.path("mono_b.txt"), render(&twin.vocab, &twin.mono_b.sentences)?)?;
    save_tasks(&dir.path("task_a_train.jsonl"), &data.task_a_train)?;
    save_tasks(&dir.path("task_a_eval.jsonl"), &data.task_a_eval)?;
    save_tasks(&dir.path("task_b_train.jsonl"), &data.task_b_pool)?;
    save_tasks(&dir.path("task_b_eval.jsonl"), &data.task_b_eval)?;
    for (name, examples) in [
        ("task_a_eval.manifest.jsonl", &data.task_a_eval),
        ("task_b_eval.manifest.jsonl", &data.task_b_eval),
    ] {
        let entries: Vec<ManifestEntry> = examples
            .iter()
            .map(|e| ManifestEntry {
                input: e.input.clone(),
                src_lang: e.lang.name.clone(),
                tgt_lang: e.lang.name.clone(),
            })
            .collect();
        write_jsonl(&dir.path(name), &entries)?;
    }
    println!(
        "wrote {} (vocabulary {}, {} + {} monolingual, {} parallel)",
        out.display(),
        twin.vocab.len(),
        twin.mono_a.sentences.len(),
        twin.mono_b.sentences.len(),
        twin.parallel.pairs.len()
    );
    Ok(())
}

pub fn learn_vocab_cmd(common: &Common, inputs: &[PathBuf], out: &Path, char_base: bool) -> CmdResult {
    let cfg = load_config(common)?;
    check_outputs(common, &[out])?;
    let mut corpora = Vec::with_capacity(inputs.len());
    for p in inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        corpora.push(
            text.lines()
                .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>(),
        );
    }
    let base = if char_base { BaseUnit::Char } else { cfg.vocab.base };
    let vocab = learn_vocab(&corpora, cfg.vocab.num_merges, base)?;
    ensure_parent(out)?;
    fs::write(out, vocab.to_text()).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} ({} tokens, {} merges)", out.display(), vocab.len(), vocab.merges().len());
    Ok(())
}

fn print_frozen(before: &Seq2SeqModel<f32>, after: &Seq2SeqModel<f32>, trainable: GroupSet) -> CmdResult {
    for g in trainable.complement().groups() {
        let set = GroupSet::of(&[g]);
        let (h0, h1) = (before.digest(set), after.digest(set));
        if h0 != h1 {
            return Err(anyhow!("frozen group {} changed during training", g.name()).into());
        }
        println!("frozen {:<26} {h1} unchanged", g.name());
    }
    Ok(())
}

fn trace_path(out: &Path, trace: Option<&Path>) -> PathBuf {
    trace.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("csv"))
}

fn languages_of(meta: &CheckpointMeta) -> anyhow::Result<LanguageSet> {
    Ok(LanguageSet::new(meta.languages.iter().cloned())?)
}

fn save(model: &Seq2SeqModel<f32>, meta: &CheckpointMeta, out: &Path) -> anyhow::Result<()> {
    ensure_parent(out)?;
    save_checkpoint(model, meta, out).with_context(|| format!("writing {}", out.display()))?;
    println!("checkpoint {} sha256 {}", out.display(), model.digest(GroupSet::all()));
    Ok(())
}

pub fn pretrain(
    common: &Common,
    stage: u8,
    data: &Path,
    init: Option<&Path>,
    out: &Path,
    trace: Option<&Path>,
    variant: VariantArg,
) -> CmdResult {
    let cfg = load_config(common)?;
    let exp = &cfg.experiment;
    if stage == 2 && init.is_none() {
        return Err(Failure::usage(anyhow!("stage 2 needs a stage-1 checkpoint (--init)")));
    }
    if stage == 1 && variant != VariantArg::Full {
        return Err(Failure::usage(anyhow!("--variant applies to stage 2 only")));
    }
    let trace = trace_path(out, trace);
    check_outputs(common, &[out, &trace])?;
    let dir = DataDir { root: data.to_path_buf() };
    let vocab = dir.vocab()?;
    let (mut model, languages) = match init {
        Some(p) => {
            let (m, meta) = load_checkpoint::<f32>(p).with_context(|| format!("loading {}", p.display()))?;
            (m, languages_of(&meta)?)
        }
        None => {
            let langs = twin_languages();
            (new_model(exp, vocab.len(), langs.len())?, langs)
        }
    };
    if model.config().vocab_size != vocab.len() {
        return Err(anyhow!(
            "checkpoint vocabulary {} differs from data vocabulary {}",
            model.config().vocab_size,
            vocab.len()
        )
        .into());
    }
    let (mono, parallel) = dir.corpora(&languages)?;
    let before = model.clone();
    let (plan, phase, label, stream) = if stage == 1 {
        (StagePlan::stage_one(), &exp.stage1, "stage1".to_string(), "stage1")
    } else {
        let v = match variant {
            VariantArg::Full => Variant::Full,
            VariantArg::NoXae => Variant::NoXae,
            VariantArg::NoDae => Variant::NoDae,
        };
        (v.stage_two_plan(), &exp.stage2, format!("stage2:{}", v.name()), "stage2")
    };
    let settings: TrainSettings = exp.settings(phase, stream);
    let log = if stage == 1 {
        training::pretrain_stage1(&mut model, &mono, &parallel, &plan, &settings, None)?
    } else {
        training::pretrain_stage2(&mut model, &mono, &parallel, &plan, &settings, None)?
    };
    print_frozen(&before, &model, plan.trainable)?;
    let meta = CheckpointMeta {
        languages: languages.names(),
        label,
        step: log.rows.len() as u64,
    };
    save(&model, &meta, out)?;
    ensure_parent(&trace)?;
    log.write_csv(&trace)?;
    println!("trace {} ({} rows)", trace.display(), log.rows.len());
    Ok(())
}

pub fn finetune(
    common: &Common,
    strategy: Strategy,
    tasks: &Path,
    init: &Path,
    out: &Path,
    trace: Option<&Path>,
) -> CmdResult {
    let cfg = load_config(common)?;
    let trace = trace_path(out, trace);
    check_outputs(common, &[out, &trace])?;
    let (mut model, meta) = load_checkpoint::<f32>(init).with_context(|| format!("loading {}", init.display()))?;
    let languages = languages_of(&meta)?;
    let examples = load_tasks(tasks, &languages).with_context(|| tasks.display().to_string())?;
    let before = model.clone();
    let settings = cfg.experiment.settings(&cfg.experiment.finetune, "finetune");
    let log = training::finetune(&mut model, &examples, strategy, &settings, None)?;
    print_frozen(&before, &model, strategy.trainable())?;
    let meta = CheckpointMeta {
        languages: meta.languages,
        label: format!("finetune:{}", strategy.name()),
        step: log.rows.len() as u64,
    };
    save(&model, &meta, out)?;
    ensure_parent(&trace)?;
    log.write_csv(&trace)?;
    Ok(())
}

#[derive(Deserialize)]
struct IdsRecord {
    lang: String,
    ids: Vec<TokenId>,
}

fn lexicon_of(paths: &[PathBuf]) -> anyhow::Result<BTreeSet<TokenId>> {
    let mut set = BTreeSet::new();
    for p in paths {
        let records: Vec<IdsRecord> = read_jsonl(p).with_context(|| p.display().to_string())?;
        set.extend(records.into_iter().flat_map(|r| r.ids));
    }
    Ok(set)
}

pub fn generate(common: &Common, checkpoint: &Path, manifest: &Path, out: &Path, restrict: &[PathBuf]) -> CmdResult {
    let cfg = load_config(common)?;
    check_outputs(common, &[out])?;
    let (model, meta) = load_checkpoint::<f32>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let languages = languages_of(&meta)?;
    let entries = read_manifest(manifest).with_context(|| manifest.display().to_string())?;
    let allowed = if restrict.is_empty() {
        None
    } else {
        let mut corpora = Vec::with_capacity(restrict.len());
        for p in restrict {
            let records: Vec<IdsRecord> = read_jsonl(p).with_context(|| p.display().to_string())?;
            let lang = match records.first() {
                Some(r) => languages
                    .by_name(&r.lang)
                    .cloned()
                    .ok_or_else(|| anyhow!("{}: unknown language {:?}", p.display(), r.lang))?,
                None => continue,
            };
            corpora.push(MonolingualCorpus {
                lang,
                sentences: records.into_iter().map(|r| r.ids).collect(),
            });
        }
        Some(restrict_vocab(&corpora.iter().collect::<Vec<_>>()))
    };
    let lang_id = |line: usize, name: &str| {
        languages
            .by_name(name)
            .map(|t| t.id)
            .ok_or_else(|| anyhow!("{}: line {line}: unknown language {name:?}", manifest.display()))
    };
    let mut records = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let src = lang_id(i + 1, &e.src_lang)?;
        let tgt = lang_id(i + 1, &e.tgt_lang)?;
        let dc = cfg.experiment.decode_config(tgt, allowed.clone());
        let d = beam_search(&model, &e.input, src, &dc)
            .with_context(|| format!("{}: line {}", manifest.display(), i + 1))?;
        records.push(GenerationRecord {
            output: d.ids,
            score: d.score,
        });
    }
    ensure_parent(out)?;
    write_outputs(out, &records)?;
    println!("wrote {} outputs to {}", records.len(), out.display());
    Ok(())
}

#[derive(Deserialize)]
struct RefRecord {
    target: Vec<TokenId>,
}

pub fn evaluate(common: &Common, outputs: &Path, refs: &Path, lexicon: &Path, out: &Path) -> CmdResult {
    let cfg = load_config(common)?;
    check_outputs(common, &[out])?;
    let hyps: Vec<GenerationRecord> = read_jsonl(outputs).with_context(|| outputs.display().to_string())?;
    let refs_v: Vec<RefRecord> = read_jsonl(refs).with_context(|| refs.display().to_string())?;
    let lex = lexicon_of(&[lexicon.to_path_buf()])?;
    let h: Vec<Vec<TokenId>> = hyps.into_iter().map(|r| r.output).collect();
    let r: Vec<Vec<TokenId>> = refs_v.into_iter().map(|r| r.target).collect();
    let report = score(&h, &r, &lex)?;
    let value = json!({
        "metrics": report,
        "bleu_smoothing": BLEU_SMOOTHING,
        "outputs": outputs.display().to_string(),
        "references": refs.display().to_string(),
        "config": cfg.echo(),
    });
    write_json(out, &value)?;
    println!(
        "bleu4 {:.4} rouge1 {:.4} rouge2 {:.4} rougeL {:.4} membership {:.4}",
        report.bleu4, report.rouge1, report.rouge2, report.rouge_l, report.lang_membership
    );
    Ok(())
}

fn ablate_seed(exp: &ExperimentConfig, which: AblationKind) -> anyhow::Result<serde_json::Value> {
    let data = prepare(exp)?;
    Ok(match which {
        AblationKind::Strategies => {
            let pre = pretrain_variants(exp, &data, &[Variant::Full])?;
            let full = pre.get(Variant::Full).expect("full variant trained");
            let rows = strategy_comparison(exp, &data, full, &Strategy::ALL)?;
            let baseline = strategy_comparison(exp, &data, &pre.stage1, &[Strategy::EncoderLayers])?;
            json!({ "rows": rows, "untrained_decoder_baseline": baseline[0] })
        }
        kind => {
            let variants: &[Variant] = match kind {
                AblationKind::NoXae => &[Variant::Full, Variant::NoXae],
                AblationKind::NoDae => &[Variant::Full, Variant::NoDae],
                _ => &Variant::ALL,
            };
            let pre = pretrain_variants(exp, &data, variants)?;
            json!({ "rows": objective_ablation(exp, &data, &pre)? })
        }
    })
}

pub fn ablate(common: &Common, which: AblationKind, out: &Path, seeds: &[u64]) -> CmdResult {
    let cfg = load_config(common)?;
    check_outputs(common, &[out])?;
    let seeds = if seeds.is_empty() {
        vec![cfg.experiment.seed]
    } else {
        seeds.to_vec()
    };
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let mut r = ablate_seed(&cfg.experiment.with_seed(seed), which)?;
        r["seed"] = json!(seed);
        results.push(r);
    }
    let name = match which {
        AblationKind::NoXae => "no_xae",
        AblationKind::NoDae => "no_dae",
        AblationKind::Objectives => "objectives",
        AblationKind::Strategies => "strategies",
    };
    write_json(
        out,
        &json!({
            "ablation": name,
            "seeds": seeds,
            "bleu_smoothing": BLEU_SMOOTHING,
            "config": cfg.echo(),
            "results": results,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

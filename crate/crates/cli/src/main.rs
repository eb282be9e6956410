mod config;
mod manifest;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use msnmt_core::data::{
    generate_synthetic_dataset, load_entity_annotations, load_image_id_map,
    load_parallel_corpus, write_dataset, FeatureStore, SentencePair, SynthSpec, Vocab,
};
use msnmt_core::decoding::{
    read_traces, translate_corpus, write_hypotheses, write_traces, FeatureSource,
};
use msnmt_core::evaluation::{
    adversarial_eval, bleu, bootstrap_significance, corpus_average_lagging,
    count_correct_entities, count_total_entities, ALScore, BleuScore, EntityReportRow,
    SignificanceResult,
};
use msnmt_core::model::{Forward, Model, ModelConfig};
use msnmt_core::tensor::{grad_check, Tensor};
use msnmt_core::training::{
    sequence_steps, train_msnmt_pipeline, train_stage, TrainConfig, TrainReport,
};
use msnmt_core::Policy;

use config::{ExperimentConfig, PolicyField};
use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "msnmt", version, about = "Simultaneous multimodal NMT experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file and write a checkpoint.
    Train(TrainArgs),
    /// Decode a source file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score hypothesis files: BLEU, latency, significance.
    Evaluate(EvaluateArgs),
    /// Congruent-vs-incongruent image evaluation.
    Adversarial(AdversarialArgs),
    /// Entity-before-input analysis over one or more systems.
    AnalyzeEntities(AnalyzeEntitiesArgs),
    /// Generate the synthetic image-decisive dataset.
    SynthData(SynthDataArgs),
    /// Finite-difference verification of the full model gradient.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides [training].seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides [training].k; an integer or "full".
    #[arg(long = "policy.k")]
    policy_k: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    /// Feature file path, or "zeros" for the zero-feature regime.
    #[arg(long, default_value = "zeros")]
    features: String,
    /// Aligned image-id file (required with a feature file).
    #[arg(long)]
    image_ids: Option<PathBuf>,
    #[arg(long = "policy.k")]
    policy_k: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Decode trace sidecar; enables Average Lagging.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Second hypothesis file; enables the paired bootstrap.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Average previously written report.json files instead of scoring.
    #[arg(long, num_args = 1..)]
    aggregate: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdversarialArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    image_ids: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long = "policy.k")]
    policy_k: String,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyzeEntitiesArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    entities: PathBuf,
    /// One or more `name=hypfile` system entries.
    #[arg(long = "hyp", num_args = 1..)]
    systems: Vec<String>,
    /// Comma-separated wait-k values, e.g. "1,3,5".
    #[arg(long, default_value = "1,3,5,7")]
    k: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthDataArgs {
    #[arg(long, default_value_t = 500)]
    sentences: usize,
    #[arg(long, default_value_t = 10)]
    object_classes: usize,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long, default_value_t = 6)]
    verbs: usize,
    #[arg(long, default_value_t = 4)]
    min_len: usize,
    #[arg(long, default_value_t = 6)]
    max_len: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Must be "wide"; finite differences drown in 32-bit noise.
    #[arg(long, default_value = "wide")]
    precision: String,
    /// Run the deliberately broken backward rule; must FAIL.
    #[arg(long, default_value_t = false)]
    negative_control: bool,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Command::Train(a) => cmd_train(a).map(|_| 0),
        Command::Translate(a) => cmd_translate(a).map(|_| 0),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| 0),
        Command::Adversarial(a) => cmd_adversarial(a).map(|_| 0),
        Command::AnalyzeEntities(a) => cmd_analyze_entities(a).map(|_| 0),
        Command::SynthData(a) => cmd_synth_data(a).map(|_| 0),
        Command::GradCheck(a) => cmd_grad_check(a),
    }
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

fn joint_vocab(pairs: &[SentencePair], cap: usize) -> Result<Vocab> {
    let joint: Vec<Vec<String>> = pairs
        .iter()
        .map(|p| p.source.iter().chain(&p.target).cloned().collect())
        .collect();
    Ok(Vocab::build(joint.iter().map(|s| s.as_slice()), cap)?)
}

#[derive(Serialize)]
struct TrainOutput {
    stage1: TrainReport,
    stage2: Option<TrainReport>,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.training.seed = seed;
    }
    if let Some(k) = &args.policy_k {
        cfg.training.k = PolicyField::Name(k.clone());
    }
    let tc = cfg.train_config()?;

    let mut train_pairs =
        load_parallel_corpus(&cfg.data.train_source, &cfg.data.train_target)?;
    let mut dev_pairs = load_parallel_corpus(&cfg.data.dev_source, &cfg.data.dev_target)?;
    if let Some(p) = &cfg.data.image_ids {
        load_image_id_map(p, &mut train_pairs)?;
    }
    if let Some(p) = &cfg.data.dev_image_ids {
        load_image_id_map(p, &mut dev_pairs)?;
    }
    let features = match &cfg.data.features {
        Some(p) => Some(FeatureStore::load(p)?),
        None => None,
    };

    let vocab = joint_vocab(&train_pairs, cfg.data.vocab_cap)?;
    let model_cfg = cfg.model_config(vocab.len(), tc.seed);
    let mut model: Model<f32> = Model::new(model_cfg, vocab)?;

    let ckpt_path = args.out.join("model.ckpt");
    let mut manifest = RunManifest::new(tc.seed, serde_json::to_value(&cfg)?);
    for p in [
        Some(&cfg.data.train_source),
        Some(&cfg.data.train_target),
        Some(&cfg.data.dev_source),
        Some(&cfg.data.dev_target),
        cfg.data.image_ids.as_ref(),
        cfg.data.dev_image_ids.as_ref(),
        cfg.data.features.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        manifest.fingerprint(p)?;
    }
    manifest.checkpoint = Some(ckpt_path.display().to_string());
    manifest.write(&args.out)?;

    let output = if model.config.multimodal {
        match &features {
            Some(store) => {
                let pre = TrainConfig {
                    patience: cfg.pipeline.pretrain_patience,
                    ..tc.clone()
                };
                let fin = TrainConfig {
                    batch_size: cfg.pipeline.finetune_batch_size,
                    patience: cfg.pipeline.finetune_patience,
                    seed: tc.seed.wrapping_add(1),
                    ..tc.clone()
                };
                let (s1, s2) =
                    train_msnmt_pipeline(&mut model, &train_pairs, &dev_pairs, &pre, &fin, store)?;
                TrainOutput {
                    stage1: s1,
                    stage2: Some(s2),
                }
            }
            None => TrainOutput {
                stage1: train_stage(&mut model, &train_pairs, &dev_pairs, &tc, None)?,
                stage2: None,
            },
        }
    } else {
        TrainOutput {
            stage1: train_stage(&mut model, &train_pairs, &dev_pairs, &tc, None)?,
            stage2: None,
        }
    };

    model.save(&ckpt_path)?;
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&output)? + "\n",
    )?;
    let last = output.stage2.as_ref().unwrap_or(&output.stage1);
    println!(
        "trained: best dev BLEU {:.2} at epoch {} ({})",
        last.best_dev_bleu, last.best_epoch, last.stop_reason
    );
    Ok(())
}

fn cmd_translate(args: TranslateArgs) -> Result<()> {
    let model: Model<f32> = Model::load(&args.checkpoint)?;
    let policy: Policy = args.policy_k.parse::<Policy>()?;

    let sources = read_token_lines(&args.source)?;
    let image_ids: Option<Vec<String>> = match &args.image_ids {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let ids: Vec<String> = text.lines().map(str::to_string).collect();
            if ids.len() != sources.len() {
                bail!(
                    "{} image ids for {} source lines",
                    ids.len(),
                    sources.len()
                );
            }
            Some(ids)
        }
        None => None,
    };
    let pairs: Vec<SentencePair> = sources
        .into_iter()
        .enumerate()
        .map(|(i, source)| SentencePair {
            id: i,
            source,
            target: Vec::new(),
            image_id: image_ids.as_ref().map(|ids| ids[i].clone()),
        })
        .collect();

    let store;
    let feature_source = if !model.config.multimodal {
        if args.features != "zeros" {
            bail!("text-only checkpoint cannot take image features");
        }
        FeatureSource::None
    } else if args.features == "zeros" {
        FeatureSource::Zeros
    } else {
        if image_ids.is_none() {
            bail!("--image-ids is required with a feature file");
        }
        store = FeatureStore::load(Path::new(&args.features))?;
        FeatureSource::Store(&store)
    };

    let mut manifest = RunManifest::new(model.config.seed, serde_json::Value::Null);
    manifest.fingerprint(&args.checkpoint)?;
    manifest.fingerprint(&args.source)?;
    if let Some(p) = &args.image_ids {
        manifest.fingerprint(p)?;
    }
    if args.features != "zeros" {
        manifest.fingerprint(Path::new(&args.features))?;
    }
    manifest.checkpoint = Some(args.checkpoint.display().to_string());
    manifest.write(&args.out)?;

    let hyps = translate_corpus(&model, &pairs, policy, feature_source)?;
    write_hypotheses(&args.out.join("hyp.txt"), &model, &hyps)?;
    write_traces(&args.out.join("traces.txt"), &hyps)?;
    println!("translated {} sentences (policy {policy})", hyps.len());
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct EvalReport {
    bleu: BleuScore,
    al: Option<ALScore>,
    significance: Option<SignificanceResult>,
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    if !args.aggregate.is_empty() {
        return aggregate_reports(&args);
    }
    let hyp_path = args.hyp.as_ref().ok_or_else(|| anyhow!("--hyp is required"))?;
    let ref_path = args
        .reference
        .as_ref()
        .ok_or_else(|| anyhow!("--ref is required"))?;
    let hyps = read_token_lines(hyp_path)?;
    let refs = read_token_lines(ref_path)?;
    let score = bleu(&hyps, &refs)?;
    let al = match &args.trace {
        Some(p) => Some(corpus_average_lagging(&read_traces(p)?)?),
        None => None,
    };
    let significance = match &args.compare {
        Some(p) => {
            let other = read_token_lines(p)?;
            Some(bootstrap_significance(
                &hyps,
                &other,
                &refs,
                args.resamples,
                args.alpha,
                args.seed,
            )?)
        }
        None => None,
    };

    let mut manifest = RunManifest::new(args.seed, serde_json::Value::Null);
    manifest.fingerprint(hyp_path)?;
    manifest.fingerprint(ref_path)?;
    if let Some(p) = &args.trace {
        manifest.fingerprint(p)?;
    }
    if let Some(p) = &args.compare {
        manifest.fingerprint(p)?;
    }
    manifest.write(&args.out)?;

    let report = EvalReport {
        bleu: score,
        al,
        significance,
    };
    std::fs::write(
        args.out.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    let mut csv = String::from("bleu,brevity_penalty,hyp_len,ref_len,al\n");
    csv.push_str(&format!(
        "{:.4},{:.4},{},{},{}\n",
        report.bleu.score,
        report.bleu.brevity_penalty,
        report.bleu.hyp_len,
        report.bleu.ref_len,
        report
            .al
            .as_ref()
            .map(|a| format!("{:.4}", a.mean))
            .unwrap_or_default(),
    ));
    std::fs::write(args.out.join("report.csv"), csv)?;

    print!("BLEU {:.2}", report.bleu.score);
    if let Some(a) = &report.al {
        print!("  AL {:.2}", a.mean);
    }
    if let Some(s) = &report.significance {
        print!(
            "  diff {:+.2} p={:.4} {}",
            s.observed_diff,
            s.p_value,
            if s.significant { "significant" } else { "not significant" }
        );
    }
    println!();
    Ok(())
}

fn aggregate_reports(args: &EvaluateArgs) -> Result<()> {
    let mut bleus = Vec::new();
    let mut als = Vec::new();
    for p in &args.aggregate {
        let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing report {}", p.display()))?;
        bleus.push(report.bleu.score);
        if let Some(a) = report.al {
            als.push(a.mean);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    #[derive(Serialize)]
    struct Aggregate {
        reports: usize,
        bleu_mean: f64,
        al_mean: Option<f64>,
    }
    let agg = Aggregate {
        reports: bleus.len(),
        bleu_mean: mean(&bleus),
        al_mean: if als.is_empty() { None } else { Some(mean(&als)) },
    };
    std::fs::write(
        args.out.join("aggregate.json"),
        serde_json::to_string_pretty(&agg)? + "\n",
    )?;
    println!(
        "averaged {} reports: BLEU {:.2}{}",
        agg.reports,
        agg.bleu_mean,
        agg.al_mean
            .map(|a| format!(", AL {a:.2}"))
            .unwrap_or_default()
    );
    Ok(())
}

fn cmd_adversarial(args: AdversarialArgs) -> Result<()> {
    let model: Model<f32> = Model::load(&args.checkpoint)?;
    let policy: Policy = args.policy_k.parse::<Policy>()?;
    let mut pairs = load_parallel_corpus(&args.source, &args.reference)?;
    load_image_id_map(&args.image_ids, &mut pairs)?;
    let store = FeatureStore::load(&args.features)?;

    let mut manifest = RunManifest::new(args.seed, serde_json::Value::Null);
    for p in [&args.checkpoint, &args.source, &args.reference, &args.image_ids, &args.features] {
        manifest.fingerprint(p)?;
    }
    manifest.checkpoint = Some(args.checkpoint.display().to_string());
    manifest.write(&args.out)?;

    let result = adversarial_eval(
        &model,
        &pairs,
        &store,
        policy,
        args.resamples,
        args.alpha,
        args.seed,
    )?;
    std::fs::write(
        args.out.join("adversarial.json"),
        serde_json::to_string_pretty(&result)? + "\n",
    )?;
    println!(
        "congruent BLEU {:.2}  incongruent BLEU {:.2}  diff {:+.2} p={:.4} {}",
        result.congruent.score,
        result.incongruent.score,
        result.significance.observed_diff,
        result.significance.p_value,
        if result.significance.significant {
            "significant"
        } else {
            "not significant"
        }
    );
    Ok(())
}

fn cmd_analyze_entities(args: AnalyzeEntitiesArgs) -> Result<()> {
    let pairs = load_parallel_corpus(&args.source, &args.reference)?;
    let annotations = load_entity_annotations(&args.entities, &pairs)?;
    let ks: Vec<usize> = args
        .k
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| anyhow!("bad k value {s:?}")))
        .collect::<Result<_>>()?;
    let mut systems: Vec<(String, HashMap<usize, Vec<String>>)> = Vec::new();
    for entry in &args.systems {
        let (name, path) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("expected --hyp name=path, got {entry:?}"))?;
        let lines = read_token_lines(Path::new(path))?;
        if lines.len() != pairs.len() {
            bail!("{name}: {} hypotheses for {} sentences", lines.len(), pairs.len());
        }
        systems.push((name.to_string(), lines.into_iter().enumerate().collect()));
    }

    let mut manifest = RunManifest::new(0, serde_json::Value::Null);
    for p in [&args.source, &args.reference, &args.entities] {
        manifest.fingerprint(p)?;
    }
    for entry in &args.systems {
        if let Some((_, path)) = entry.split_once('=') {
            manifest.fingerprint(Path::new(path))?;
        }
    }
    manifest.write(&args.out)?;

    let mut rows = Vec::new();
    for &k in &ks {
        let countable = count_total_entities(&pairs, &annotations, k)?;
        let correct = systems
            .iter()
            .map(|(name, hyps)| (name.clone(), count_correct_entities(hyps, &countable)))
            .collect();
        rows.push(EntityReportRow {
            k,
            total: countable.len(),
            correct,
        });
    }
    std::fs::write(
        args.out.join("entities.json"),
        serde_json::to_string_pretty(&rows)? + "\n",
    )?;
    for row in &rows {
        print!("k={} total={}", row.k, row.total);
        for (name, n) in &row.correct {
            print!("  {name}={n}");
        }
        println!();
    }
    Ok(())
}

fn cmd_synth_data(args: SynthDataArgs) -> Result<()> {
    let spec = SynthSpec {
        sentences: args.sentences,
        object_classes: args.object_classes,
        subjects: args.subjects,
        verbs: args.verbs,
        min_len: args.min_len,
        max_len: args.max_len,
        feature_dim: args.feature_dim,
        noise: args.noise,
    };
    let data = generate_synthetic_dataset(&spec, args.seed)?;
    let manifest = RunManifest::new(args.seed, serde_json::to_value(&spec)?);
    manifest.write(&args.out)?;
    write_dataset(&args.out, &data)?;
    println!(
        "wrote {} sentence pairs to {}",
        data.pairs.len(),
        args.out.display()
    );
    Ok(())
}

const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

fn cmd_grad_check(args: GradCheckArgs) -> Result<i32> {
    if args.precision != "wide" {
        bail!(
            "gradient checking requires --precision wide; central differences \
             are noise-dominated in standard (32-bit) precision"
        );
    }
    let err = if args.negative_control {
        negative_control_error()?
    } else {
        full_step_error()?
    };
    let pass = err <= GRAD_CHECK_TOLERANCE;
    println!(
        "max relative error {err:.3e} — {} (tolerance {GRAD_CHECK_TOLERANCE:.0e})",
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(if pass { 0 } else { 1 })
}

/// Full multimodal forward + wait-k loss at tiny dims, 64-bit.
fn full_step_error() -> Result<f64> {
    let tokens: Vec<Vec<String>> = (0..7).map(|i| vec![format!("w{i}")]).collect();
    let vocab = Vocab::build(tokens.iter().map(|s| s.as_slice()), 11)?;
    let model: Model<f64> = Model::new(
        ModelConfig {
            vocab_size: 11,
            embed_dim: 4,
            hidden_dim: 6,
            image_dim: 8,
            image_seq: 1,
            attn_dim: 4,
            multimodal: true,
            seed: 42,
            ..Default::default()
        },
        vocab,
    )?;
    let params: Vec<Tensor<f64>> = model.params().to_vec();
    let feature = [0.4, -0.2, 0.1, 0.0, 0.7, -0.5, 0.3, 0.2];
    let err = grad_check(
        |tape, vars| {
            let mut fwd = Forward::eval(&model);
            std::mem::swap(&mut fwd.tape, tape);
            fwd.set_param_vars(vars.to_vec());
            let steps = sequence_steps(
                &mut fwd,
                &[4, 5, 6, 7],
                &[8, 9, 10],
                &feature,
                Some(Policy::WaitK(2)),
            )?;
            let rows: Vec<_> = steps.iter().map(|s| s.0).collect();
            let targets: Vec<_> = steps.iter().map(|s| s.1).collect();
            let stacked = fwd.tape.stack_rows(&rows)?;
            let loss = fwd.tape.cross_entropy(stacked, &targets)?;
            std::mem::swap(&mut fwd.tape, tape);
            Ok(loss)
        },
        &params,
        1e-3,
    )?;
    Ok(err)
}

/// Same harness over a backward rule that is wrong on purpose; a
/// passing run here would mean the checker itself is broken.
fn negative_control_error() -> Result<f64> {
    let w = Tensor::new(vec![2, 2], vec![0.3f64, -0.2, 0.5, 0.1])?.requires_grad();
    let err = grad_check(
        |tape, vars| {
            let h = tape.tanh_corrupted(vars[0]);
            Ok(tape.sum(h))
        },
        &[w],
        1e-3,
    )?;
    Ok(err)
}

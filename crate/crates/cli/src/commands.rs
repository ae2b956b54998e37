use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use graft_core::corpus::{clean_documents, mix_stream, read_documents, write_documents, CleanConfig, MixConfig};
use graft_core::io::{read_to_string, write_atomic};
use graft_core::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use graft_core::surgery::{
    diff_checkpoints, diff_frozen, extend_model, validate_plan, ExtensionPlan, TrainabilityMask, Violation,
};
use graft_core::tokenizer::{
    expand_embeddings, expansion_ratio, merge_vocab, train_vocab, vocab_overlap, EmbeddingInit, MergedTokenizer,
    SubwordVocab,
};
use graft_core::train::{
    encode_documents, perplexity, run_placement_study, run_retention_experiment, train, ExperimentConfig,
    PlacementArm, TrainConfig, Workbench,
};
use graft_core::GraftError;

use crate::{Cli, Command, EvalCommand, ExpCommand, InitKind, PlanCommand, TokCommand, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Init { print_config } => init(cli, *print_config),
        Command::Plan(PlanCommand::Validate { plan, model }) => plan_validate(plan, model.as_deref()),
        Command::Plan(PlanCommand::Apply { plan, model, mask_out }) => {
            let base = load_checkpoint(model)?;
            let plan = load_plan(plan)?;
            let (extended, mask) = extend_model(&base, &plan)?;
            write_model_and_mask(cli, &extended, &mask, mask_out.as_deref())
        }
        Command::Extend {
            model,
            tok,
            plan,
            init,
            mask_out,
        } => extend(cli, model, tok, plan.as_deref(), *init, mask_out.as_deref()),
        Command::Tok(cmd) => tok(cli, cmd),
        Command::Clean(args) => clean(cli, args.input.as_deref(), args.print_config),
        Command::Mix { anchor, new, phi, count } => {
            let cfg = MixConfig {
                anchor_fraction: *phi,
                seed: cli.seed.unwrap_or(0),
                ..MixConfig::default()
            };
            let docs = mix_stream(&cfg, &read_documents(anchor)?, &read_documents(new)?, *count)?;
            write_documents(out(cli)?, &docs)?;
            Ok(())
        }
        Command::Train(args) => {
            let cfg = train_config(cli)?;
            if args.print_config {
                print!("{}", cfg.to_toml());
                return Ok(());
            }
            let (model, tok, data) = (required(&args.model)?, required(&args.tok)?, required(&args.data)?);
            train_cmd(cli, &cfg, model, tok, data, args.mask.as_deref(), args.curve.as_deref())
        }
        Command::Eval(EvalCommand::Ppl { model, tok, data, window }) => {
            let model = load_checkpoint(model)?;
            let tokens = encode_documents(&SubwordVocab::load(tok)?, &read_documents(data)?);
            println!("{:.6}", perplexity(&model, &tokens, *window)?);
            Ok(())
        }
        Command::Exp(cmd) => exp(cli, cmd),
        Command::Diff { a, b, mask } => {
            let (a, b) = (load_checkpoint(a)?, load_checkpoint(b)?);
            let report = match mask {
                Some(m) => diff_frozen(&a, &b, &load_mask(m)?)?,
                None => diff_checkpoints(&a, &b)?,
            };
            emit(cli, &report.to_tsv())
        }
    }
}

fn info(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| UsageError("this command needs --out".into()).into())
}

fn required(arg: &Option<PathBuf>) -> Result<&Path> {
    // Guarded by clap's `required_unless_present`.
    arg.as_deref()
        .ok_or_else(|| UsageError("missing a required argument".into()).into())
}

/// Writes `text` to `--out` when given, otherwise prints it.
fn emit(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(path) => Ok(write_atomic(path, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn config_text(cli: &Cli) -> Result<Option<String>> {
    cli.config.as_deref().map(|p| Ok(read_to_string(p)?)).transpose()
}

fn load_plan(path: &Path) -> Result<ExtensionPlan> {
    ExtensionPlan::from_toml(&read_to_string(path)?).with_context(|| format!("reading plan {}", path.display()))
}

fn load_mask(path: &Path) -> Result<TrainabilityMask> {
    TrainabilityMask::from_toml(&read_to_string(path)?).with_context(|| format!("reading mask {}", path.display()))
}

fn write_model_and_mask(cli: &Cli, model: &Model, mask: &TrainabilityMask, mask_out: Option<&Path>) -> Result<()> {
    let path = out(cli)?;
    save_checkpoint(model, path)?;
    let mask_path = match mask_out {
        Some(p) => p.to_path_buf(),
        None => {
            let mut name = path.as_os_str().to_owned();
            name.push(".mask.toml");
            PathBuf::from(name)
        }
    };
    write_atomic(&mask_path, mask.to_toml().as_bytes())?;
    let counts = model.count_params(Some(mask))?;
    info(
        cli,
        format!(
            "wrote {} ({} blocks, {} of {} parameters trainable) and {}",
            path.display(),
            model.blocks.len(),
            counts.trainable,
            counts.total,
            mask_path.display()
        ),
    );
    Ok(())
}

fn init(cli: &Cli, print_config: bool) -> Result<()> {
    let cfg: ModelConfig = match config_text(cli)? {
        Some(text) => toml::from_str(&text).map_err(|e| GraftError::Config(e.to_string()))?,
        None => ExperimentConfig::default().model,
    };
    cfg.validate()?;
    if print_config {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    let model = Model::new_random(cfg, cli.seed.unwrap_or(0))?;
    save_checkpoint(&model, out(cli)?)?;
    info(cli, format!("{} parameters", model.num_params()));
    Ok(())
}

fn plan_validate(plan_path: &Path, model: Option<&Path>) -> Result<()> {
    let plan = load_plan(plan_path)?;
    let mut report = validate_plan(&plan);
    if let Some(path) = model {
        let n = load_checkpoint(path)?.blocks.len();
        if n != plan.n_base_layers {
            report.violations.push(Violation::BaseSizeMismatch {
                plan: plan.n_base_layers,
                model: n,
            });
        }
    }
    for v in &report.violations {
        println!("{v}");
    }
    if report.is_ok() {
        println!("ok: {} blocks after extension", plan.n_extended_layers());
        Ok(())
    } else {
        Err(GraftError::Plan(report.errors().map(|v| v.to_string()).collect()).into())
    }
}

fn extend(
    cli: &Cli,
    model: &Path,
    tok: &Path,
    plan: Option<&Path>,
    init: InitKind,
    mask_out: Option<&Path>,
) -> Result<()> {
    let base = load_checkpoint(model)?;
    let merged = MergedTokenizer::load(tok)?;
    let init = match init {
        InitKind::Mean => EmbeddingInit::Mean,
        InitKind::ZeroHead => EmbeddingInit::ZeroHead,
        InitKind::SmallRandom => EmbeddingInit::SmallRandom {
            seed: cli.seed.unwrap_or(0),
        },
    };
    let expanded = expand_embeddings(&base, &merged, init)?;
    let (model, mask) = match plan {
        Some(p) => {
            let (m, mask) = extend_model(&expanded, &load_plan(p)?)?;
            (m, mask.with_new_vocab(merged.base_size()))
        }
        None => {
            let n = expanded.blocks.len();
            (expanded, TrainabilityMask::all_trainable(n))
        }
    };
    write_model_and_mask(cli, &model, &mask, mask_out)
}

fn tok(cli: &Cli, cmd: &TokCommand) -> Result<()> {
    match cmd {
        TokCommand::Train { corpus, size } => {
            let docs = read_documents(corpus)?;
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let vocab = train_vocab(&texts, *size)?;
            vocab.save(out(cli)?)?;
            info(cli, format!("{} tokens, {} merges", vocab.len(), vocab.merges().len()));
        }
        TokCommand::Merge { base, new } => {
            let (base, new) = (SubwordVocab::load(base)?, SubwordVocab::load(new)?);
            let merged = merge_vocab(&base, &new);
            merged.save(out(cli)?)?;
            info(
                cli,
                format!(
                    "{} base + {} new tokens = {} ({} shared)",
                    merged.base_size(),
                    merged.n_new_tokens(),
                    merged.len(),
                    vocab_overlap(&base, &new)
                ),
            );
        }
        TokCommand::Encode { tok, text } => {
            let vocab = SubwordVocab::load(tok)?;
            let text = match text {
                Some(t) => t.clone(),
                None => {
                    let mut buf = String::new();
                    std::io::stdin().read_to_string(&mut buf).context("reading stdin")?;
                    buf
                }
            };
            let ids: Vec<String> = vocab.encode(&text).iter().map(|i| i.to_string()).collect();
            println!("{}", ids.join(" "));
        }
        TokCommand::Ratio { tok, corpus } => {
            let vocab = SubwordVocab::load(tok)?;
            let docs = read_documents(corpus)?;
            let r = expansion_ratio(&vocab, docs.iter().map(|d| &d.text))?;
            println!("{:.6}", r.ratio);
            info(cli, format!("{} tokens over {} words", r.tokens, r.words));
        }
    }
    Ok(())
}

fn clean(cli: &Cli, input: Option<&Path>, print_config: bool) -> Result<()> {
    let cfg = match config_text(cli)? {
        Some(text) => CleanConfig::from_toml(&text)?,
        None => CleanConfig::default(),
    };
    if print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let docs = read_documents(required(&input.map(Path::to_path_buf))?)?;
    let (kept, stats) = clean_documents(&docs, &cfg)?;
    write_documents(out(cli)?, &kept)?;
    println!("kept\t{}", stats.kept);
    for (reason, n) in &stats.rejected {
        println!("rejected_{}\t{n}", format!("{reason:?}").to_lowercase());
    }
    Ok(())
}

fn train_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match config_text(cli)? {
        Some(text) => TrainConfig::from_toml(&text)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn train_cmd(
    cli: &Cli,
    cfg: &TrainConfig,
    model: &Path,
    tok: &Path,
    data: &Path,
    mask: Option<&Path>,
    curve_out: Option<&Path>,
) -> Result<()> {
    let out_path = out(cli)?;
    let mut model = load_checkpoint(model)?;
    let mask = match mask {
        Some(m) => load_mask(m)?,
        None => TrainabilityMask::all_trainable(model.blocks.len()),
    };
    let tokens = encode_documents(&SubwordVocab::load(tok)?, &read_documents(data)?);
    info(cli, format!("training on {} tokens for {} steps", tokens.len(), cfg.steps));
    let curve = train(&mut model, &mask, &tokens, cfg)?;
    save_checkpoint(&model, out_path)?;
    if let Some(path) = curve_out {
        write_atomic(path, curve.to_tsv().as_bytes())?;
    }
    if let Some(loss) = curve.final_loss() {
        info(cli, format!("final loss {loss:.4}"));
    }
    Ok(())
}

fn exp(cli: &Cli, cmd: &ExpCommand) -> Result<()> {
    let mut cfg = match config_text(cli)? {
        Some(text) => ExperimentConfig::from_toml(&text)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let print_config = match cmd {
        ExpCommand::Retention { phi, print_config } => {
            if let Some(phi) = phi {
                cfg.phi = *phi;
            }
            *print_config
        }
        ExpCommand::Placement { print_config } => *print_config,
    };
    if print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let dir = out(cli)?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    info(cli, "preparing corpora, tokenizers and the base model");
    let wb = Workbench::prepare(&cfg)?;
    write_atomic(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_atomic(&dir.join("pretrain_curve.tsv"), wb.pretrain_curve.to_tsv().as_bytes())?;
    match cmd {
        ExpCommand::Retention { .. } => {
            info(cli, "training arms");
            let report = run_retention_experiment(&wb)?;
            write_atomic(&dir.join("report.tsv"), report.to_tsv().as_bytes())?;
            write_atomic(&dir.join("curves.tsv"), report.curves_tsv().as_bytes())?;
            print!("{}", report.to_tsv());
        }
        ExpCommand::Placement { .. } => {
            let arms = PlacementArm::standard(cfg.model.n_layers, cfg.plan.insert_after.len())?;
            info(cli, "training arms");
            let report = run_placement_study(&wb, &arms)?;
            write_atomic(&dir.join("curves.tsv"), report.curves_tsv().as_bytes())?;
            write_atomic(&dir.join("plans.toml"), report.plans_toml().as_bytes())?;
            println!("arm\ttrainable_params\tfinal_loss");
            for r in &report.results {
                let loss = r.curve.final_loss().map_or("nan".into(), |l| format!("{l:.6}"));
                println!("{}\t{}\t{loss}", r.arm.name, r.trainable_params);
            }
        }
    }
    Ok(())
}

//! `strla` — train and evaluate recursive neural networks directly on
//! JSON/XML documents.

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use strla::data::{self, SchemaTemplate, Table};
use strla::engine::{Ablation, MappingDictionary, ModelConfig, ModelKind, TreeModel};
use strla::training::{self, FoldHyper, TrainConfig};

#[derive(Parser)]
#[command(name = "strla", version, about = "End-to-end learning on semantic tree-structured data")]
struct Cli {
    /// Worker threads for batch gradients and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a CSV table into a JSON-lines dataset through a schema template.
    Convert(ConvertArgs),
    /// Train a model (k-fold cross-validation by default).
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Compare analytic gradients against finite differences on a random document.
    Gradcheck(GradcheckArgs),
    /// Generate one of the built-in synthetic benchmark tables.
    Gen(GenArgs),
}

#[derive(Args)]
struct ConvertArgs {
    /// CSV table with a header row.
    #[arg(long)]
    table: PathBuf,
    /// Schema template (JSON).
    #[arg(long)]
    schema: PathBuf,
    /// Output JSON-lines dataset.
    #[arg(long)]
    out: PathBuf,
    /// Under-sample a >80% dominant class to a 2:1 split.
    #[arg(long)]
    rebalance: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON-lines dataset.
    #[arg(long)]
    data: PathBuf,
    /// Model kind: set | lstm | tailored | mlp.
    #[arg(long)]
    kind: String,
    /// JSON training configuration (flags override file values).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Mapping dictionary (required for --kind tailored).
    #[arg(long)]
    mapping: Option<PathBuf>,
    /// Ablation: pathless | homogeneous | both.
    #[arg(long)]
    ablate: Option<String>,
    /// Raw CSV table (MLP baseline trains on feature vectors, not JSON).
    #[arg(long)]
    table: Option<PathBuf>,
    /// Label column of --table for the MLP baseline.
    #[arg(long)]
    label_column: Option<String>,
    /// Hidden layers of the MLP baseline.
    #[arg(long, default_value_t = 1)]
    mlp_layers: usize,
    /// Directory for per-fold checkpoints and the metrics summary.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Skip cross-validation: train one model on the full dataset.
    #[arg(long)]
    no_cv: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extend array-item paths with ordinal segments.
    #[arg(long)]
    ordinal_paths: bool,
    /// Inputs are reduced-XML strings; parse them into semantic trees
    /// (defaults to the XML tag-embedder mapping unless --mapping is given).
    #[arg(long)]
    xml: bool,
    /// Dataset name recorded in the metrics summary.
    #[arg(long)]
    dataset_name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Inputs are reduced-XML strings.
    #[arg(long)]
    xml: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model kind: set | lstm | tailored.
    #[arg(long, default_value = "lstm")]
    kind: String,
    #[arg(long)]
    mapping: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test fixture: corrupt one analytic gradient (negative control).
    #[arg(long, hide = true, default_value_t = 0.0)]
    inject_gradient_error: f64,
}

#[derive(Args)]
struct GenArgs {
    /// car | nursery | poker-train | poker-test.
    #[arg(long)]
    dataset: String,
    /// Output CSV path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Row count for the poker tables.
    #[arg(long)]
    n: Option<usize>,
}

/// JSON config file mirror of the training flags.
#[derive(serde::Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    hidden: Option<usize>,
    learning_rate: Option<f64>,
    folds: Option<usize>,
    seed: Option<u64>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    epsilon: Option<f64>,
    per_fold: Option<Vec<FoldHyper>>,
    mlp_layers: Option<usize>,
    /// Fraction of training-time parameter lookups remapped to the fallback
    /// groups (0 keeps fallbacks untrained).
    unseen_remap_fraction: Option<f64>,
    /// Hidden layers of the deep-set element-embedding net.
    deepset_layers: Option<usize>,
}

fn load_examples(path: &Path) -> anyhow::Result<Vec<(strla::Element, String)>> {
    data::load_jsonl(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn metrics_summary(
    dataset: &str,
    model_kind: &str,
    metrics: &training::Metrics,
) -> serde_json::Value {
    serde_json::json!({
        "dataset": dataset,
        "model_kind": model_kind,
        "folds": metrics.fold_accuracies,
        "mean_accuracy": metrics.mean_accuracy,
        "std_accuracy": metrics.std_accuracy,
        "labels": metrics.labels,
        "confusion": metrics.confusion,
    })
}

fn cmd_convert(args: ConvertArgs) -> anyhow::Result<()> {
    let table = Table::from_csv_path(&args.table)
        .with_context(|| format!("reading table {}", args.table.display()))?;
    let schema_text = std::fs::read_to_string(&args.schema)
        .with_context(|| format!("reading schema {}", args.schema.display()))?;
    let schema = SchemaTemplate::from_json(&schema_text).context("parsing schema")?;
    let mut examples = data::convert_table(&table, &schema).context("converting rows")?;
    if args.rebalance {
        examples = data::rebalance(&examples, args.seed);
    }
    data::write_jsonl(&args.out, &examples)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} examples to {}", examples.len(), args.out.display());
    Ok(())
}

struct FileSettings {
    cfg: TrainConfig,
    per_fold: Option<Vec<FoldHyper>>,
    mlp_layers: usize,
    unseen_remap: f64,
    deepset_layers: usize,
}

fn build_train_config(args: &TrainArgs) -> anyhow::Result<FileSettings> {
    let mut file = FileConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        file = serde_json::from_str(&text).context("parsing config file")?;
    }
    let mut cfg = TrainConfig::default();
    cfg.epochs = args.epochs.or(file.epochs).unwrap_or(cfg.epochs);
    cfg.batch_size = args.batch_size.or(file.batch_size).unwrap_or(cfg.batch_size);
    cfg.hidden = args.hidden.or(file.hidden).unwrap_or(cfg.hidden);
    cfg.learning_rate = args.learning_rate.or(file.learning_rate).unwrap_or(cfg.learning_rate);
    cfg.folds = args.folds.or(file.folds).unwrap_or(cfg.folds);
    cfg.seed = args.seed.or(file.seed).unwrap_or(cfg.seed);
    cfg.beta1 = file.beta1.unwrap_or(cfg.beta1);
    cfg.beta2 = file.beta2.unwrap_or(cfg.beta2);
    cfg.epsilon = file.epsilon.unwrap_or(cfg.epsilon);
    let layers = if args.mlp_layers != 1 {
        args.mlp_layers
    } else {
        file.mlp_layers.unwrap_or(args.mlp_layers)
    };
    Ok(FileSettings {
        cfg,
        per_fold: file.per_fold,
        mlp_layers: layers,
        unseen_remap: file.unseen_remap_fraction.unwrap_or(0.0),
        deepset_layers: file.deepset_layers.unwrap_or(1),
    })
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let FileSettings { cfg, per_fold, mlp_layers, unseen_remap, deepset_layers } =
        build_train_config(&args)?;
    cfg.validate().context("configuration invalid")?;
    let dataset_name = args
        .dataset_name
        .clone()
        .unwrap_or_else(|| args.data.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned()));

    if args.kind == "mlp" {
        let table_path = args
            .table
            .as_ref()
            .context("--kind mlp needs --table (feature vectors come from the raw table)")?;
        let label_column = args
            .label_column
            .as_ref()
            .context("--kind mlp needs --label-column")?;
        let table = Table::from_csv_path(table_path)?;
        let metrics =
            training::mlp_cross_validate(&table, label_column, mlp_layers, &cfg, per_fold.as_deref())?;
        let summary = metrics_summary(&dataset_name, "mlp", &metrics);
        println!("{}", serde_json::to_string_pretty(&summary)?);
        if let Some(dir) = &args.out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
        }
        return Ok(());
    }

    let kind = ModelKind::parse(&args.kind)
        .with_context(|| format!("unknown model kind '{}'", args.kind))?;
    let mut model_config = ModelConfig::new(kind, cfg.hidden, cfg.seed);
    model_config.ordinal_paths = args.ordinal_paths;
    model_config.unseen_remap_fraction = unseen_remap;
    model_config.deepset_layers = deepset_layers;
    if kind == ModelKind::Tailored {
        let path = args.mapping.as_ref().context("--kind tailored needs --mapping")?;
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading mapping {}", path.display()))?;
        model_config = model_config.with_mapping(MappingDictionary::from_json(&text)?);
    } else if args.mapping.is_some() {
        bail!("--mapping is only valid with --kind tailored");
    } else if args.xml {
        model_config = model_config.with_mapping(MappingDictionary::builtin_xml());
    }
    if let Some(mode) = &args.ablate {
        let mode = Ablation::parse(mode).with_context(|| format!("unknown ablation '{mode}'"))?;
        model_config = strla::engine::apply_ablation(model_config, mode);
    }

    let mut examples = load_examples(&args.data)?;
    if args.xml {
        examples = data::parse_xml_inputs(examples).context("parsing xml inputs")?;
    }
    if args.no_cv {
        let mut mc = model_config;
        mc.hidden = cfg.hidden;
        let mut model = TreeModel::build(mc, &examples)?;
        let all: Vec<usize> = (0..examples.len()).collect();
        let curve = training::train(&mut model, &examples, &all, &cfg)?;
        let preds = training::evaluate(&model, &examples, &all)?;
        let correct = preds.iter().zip(&examples).filter(|(p, (_, t))| *p == t).count();
        let summary = serde_json::json!({
            "dataset": dataset_name,
            "model_kind": args.kind,
            "train_accuracy": correct as f64 / examples.len() as f64,
            "final_loss": curve.last(),
            "steps": curve.len(),
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
        if let Some(dir) = &args.out_dir {
            std::fs::create_dir_all(dir)?;
            strla::checkpoint::save(&model, dir.join("model.strla.json"))?;
            let curve_lines: String =
                curve.iter().enumerate().map(|(i, l)| format!("{{\"step\":{i},\"loss\":{l}}}\n")).collect();
            std::fs::write(dir.join("loss_curve.jsonl"), curve_lines)?;
            std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
        }
        return Ok(());
    }

    let outcome = training::cross_validate(&examples, &model_config, &cfg, per_fold.as_deref())?;
    let summary = metrics_summary(&dataset_name, &args.kind, &outcome.metrics);
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if let Some(dir) = &args.out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&summary)?)?;
        for (f, model) in outcome.models.iter().enumerate() {
            strla::checkpoint::save(model, dir.join(format!("fold{f}.strla.json")))?;
        }
        for (f, curve) in outcome.loss_curves.iter().enumerate() {
            let lines: String = curve
                .iter()
                .enumerate()
                .map(|(i, l)| format!("{{\"step\":{i},\"loss\":{l}}}\n"))
                .collect();
            std::fs::write(dir.join(format!("fold{f}_loss.jsonl")), lines)?;
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let model = strla::checkpoint::load(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    let mut examples = load_examples(&args.data)?;
    if args.xml {
        examples = data::parse_xml_inputs(examples).context("parsing xml inputs")?;
    }
    for (_, label) in &examples {
        if !model.labels.iter().any(|l| l == label) {
            bail!("dataset label '{label}' is not in the checkpoint vocabulary");
        }
    }
    let all: Vec<usize> = (0..examples.len()).collect();
    let preds = training::evaluate(&model, &examples, &all)?;
    let mut confusion = vec![vec![0u64; model.labels.len()]; model.labels.len()];
    let mut correct = 0usize;
    for ((_, truth), pred) in examples.iter().zip(&preds) {
        let ti = model.labels.iter().position(|l| l == truth).unwrap();
        let pi = model.labels.iter().position(|l| l == pred).unwrap();
        confusion[ti][pi] += 1;
        if truth == pred {
            correct += 1;
        }
    }
    let summary = serde_json::json!({
        "examples": examples.len(),
        "accuracy": correct as f64 / examples.len().max(1) as f64,
        "labels": model.labels,
        "confusion": confusion,
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> anyhow::Result<bool> {
    let kind = ModelKind::parse(&args.kind)
        .with_context(|| format!("unknown model kind '{}'", args.kind))?;
    let mut config = ModelConfig::new(kind, 5, args.seed);
    if let Some(path) = &args.mapping {
        let text = std::fs::read_to_string(path)?;
        config = config.with_mapping(MappingDictionary::from_json(&text)?);
    }
    let doc = strla::synth::gen_random_document(args.seed, 3, 3);
    let other = strla::synth::gen_random_document(args.seed.wrapping_add(1), 3, 3);
    let train = vec![(doc.clone(), "a".to_string()), (other, "b".to_string())];
    let mut model = TreeModel::build(config, &train)?;
    let report =
        training::gradient_check_tree(&mut model, &doc, 0, 1e-5, args.inject_gradient_error)?;
    let pass = report.max_rel_err <= 1e-4;
    println!(
        "gradcheck kind={} seed={} parameters={} max_rel_err={:.3e} => {}",
        args.kind,
        args.seed,
        report.parameters_checked,
        report.max_rel_err,
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn cmd_gen(args: GenArgs) -> anyhow::Result<()> {
    let table = match args.dataset.as_str() {
        "car" => strla::synth::gen_car(),
        "nursery" => strla::synth::gen_nursery(),
        "poker-train" => strla::synth::gen_poker(args.n.unwrap_or(25010), args.seed, true),
        "poker-test" => strla::synth::gen_poker(args.n.unwrap_or(50000), args.seed ^ 0x7e57, false),
        other => bail!("unknown dataset '{other}' (car | nursery | poker-train | poker-test)"),
    };
    table.to_csv_path(&args.out)?;
    eprintln!("wrote {} rows to {}", table.rows().len(), args.out.display());
    Ok(())
}

fn run() -> anyhow::Result<bool> {
    let cli = Cli::parse();
    if cli.threads != 1 {
        let threads = if cli.threads == 0 { num_threads() } else { cli.threads };
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global().ok();
    }
    match cli.command {
        Command::Convert(args) => cmd_convert(args).map(|_| true),
        Command::Train(args) => cmd_train(args).map(|_| true),
        Command::Eval(args) => cmd_eval(args).map(|_| true),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Gen(args) => cmd_gen(args).map(|_| true),
    }
}

fn num_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        // a check ran to completion and failed
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

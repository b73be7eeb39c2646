//! Command-line entry point: model analysis, receptive-field probing,
//! gradient verification, training and evaluation.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage/config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smlp::analyzer::{
    count_costs, emit_table, main_model_reports, receptive_probe, stage_mask_sweep_reports,
    CostReport, TableFormat,
};
use smlp::arch::{
    build_variant, variant_config, Model, ModelConfig, Overrides, SmlpBlock, SmlpSettings,
    StageConfig,
};
use smlp::gradcheck::{gradcheck_inputs, gradcheck_params, DEFAULT_EPS};
use smlp::init::uniform;
use smlp::layers::{DepthwiseConv3x3, Linear, Mode, NormKind, NormLayer};
use smlp::params::ParamStore;
use smlp::tape::{NodeId, Tape};
use smlp::tensor::Tensor;
use smlp::textcfg::{parse_list, TextConfig};
use smlp::train::{
    evaluate, load_checkpoint, load_file, load_test_dir, load_train_dir, save_checkpoint, train,
    write_synthetic_dir, Dataset, Normalize, TrainConfig,
};
use smlp::{Error, Result};

#[derive(Parser)]
#[command(
    name = "smlp",
    about = "Axial sparse-MLP vision models: analysis, probing, verification, training"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Count parameters and MACs of a model and print a cost table
    Analyze(AnalyzeArgs),
    /// Perturb one token and report which outputs move after N block passes
    Probe(ProbeArgs),
    /// Compare tape gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Train on CIFAR-10-format data per a config file
    Train(TrainArgs),
    /// Evaluate a checkpoint on CIFAR-10-format data
    Eval(EvalArgs),
    /// Generate a synthetic dataset in the CIFAR-10 binary layout
    SynthData(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Named variant (e.g. smlpnet-t, smlpnet-b, fusion-sum)
    #[arg(long)]
    model: Option<String>,
    /// Model config file as an alternative to --model
    #[arg(long)]
    config: Option<PathBuf>,
    /// Square input resolution override
    #[arg(long)]
    res: Option<usize>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Emit the four main models (T*, T, S, B)
    #[arg(long)]
    all_main: bool,
    /// Emit the five-row per-stage mixing sweep on the base model
    #[arg(long = "table3-sweep")]
    table3_sweep: bool,
    /// Write the table to a file instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// FFN expansion override
    #[arg(long)]
    alpha: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Per-stage depths, e.g. 2,8,14,2
    #[arg(long)]
    depths: Option<String>,
    #[arg(long)]
    droppath: Option<f64>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    /// Which stages keep the sMLP branch, e.g. 0011 (per-stage-smlp variant)
    #[arg(long)]
    smlp_mask: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ProbeArgs {
    /// Grid extents: height width
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    grid: Vec<usize>,
    /// Source token: row col
    #[arg(long, num_args = 2, value_names = ["I", "J"])]
    source: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    passes: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Layers,
    Block,
    Model,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::All)]
    scope: Scope,
    /// Input resolution for the model scope (16 or 32)
    #[arg(long, default_value_t = 16)]
    res: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: deliberately desynchronizes the recorded gradient
    /// from the evaluated function; the check must then fail with exit 1
    #[arg(long)]
    perturb_backward: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with `[model]`, `[train]` and optional `[data]` sections
    #[arg(long)]
    config: PathBuf,
    /// Directory with `data_batch_<k>.bin` (falls back to SMLP_DATA_DIR)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoints and the metric log
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N training samples
    #[arg(long)]
    subset: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory with test_batch.bin, or a single .bin file
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 512)]
    train_n: usize,
    #[arg(long, default_value_t = 128)]
    test_n: usize,
    #[arg(long, default_value_t = 99)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Probe(args) => cmd_probe(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::SynthData(args) => {
            write_synthetic_dir(&args.out, args.train_n, args.test_n, args.seed)?;
            println!(
                "wrote data_batch_1.bin ({} records) and test_batch.bin ({} records) to {}",
                args.train_n,
                args.test_n,
                args.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_mask(raw: &str) -> Result<Vec<bool>> {
    raw.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Config(format!(
                "mask wants 0/1 digits, got '{other}'"
            ))),
        })
        .collect()
}

fn overrides_from(args: &AnalyzeArgs) -> Result<Overrides> {
    Ok(Overrides {
        resolution: args.res.map(|r| (r, r)),
        num_classes: args.num_classes,
        embed_dim: args.embed_dim,
        depths: args.depths.as_deref().map(parse_list).transpose()?,
        ffn_expansion: args.alpha,
        droppath: args.droppath,
        patch: args.patch,
        smlp_mask: args.smlp_mask.as_deref().map(parse_mask).transpose()?,
    })
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<ExitCode> {
    let mut reports: Vec<CostReport> = Vec::new();
    if args.all_main {
        reports.extend(main_model_reports(args.seed)?);
    }
    if args.table3_sweep {
        reports.extend(stage_mask_sweep_reports(args.seed)?);
    }
    if let Some(name) = &args.model {
        let model: Model<f32> = build_variant(name, &overrides_from(&args)?, args.seed)?;
        reports.push(count_costs(&model));
    } else if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        let config = ModelConfig::from_text(&text)?;
        let model: Model<f32> = Model::build(config, args.seed)?;
        reports.push(count_costs(&model));
    }
    if reports.is_empty() {
        return Err(Error::Config(
            "nothing to analyze: pass --model, --config, --all-main or --table3-sweep".into(),
        ));
    }
    let format = match args.format {
        Format::Text => TableFormat::Text,
        Format::Csv => TableFormat::Csv,
    };
    let table = emit_table(&reports, format);
    match &args.out {
        Some(path) => std::fs::write(path, table)?,
        None => print!("{table}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_probe(args: ProbeArgs) -> Result<ExitCode> {
    let (h, w) = (args.grid[0], args.grid[1]);
    let source = (args.source[0], args.source[1]);
    let report = receptive_probe(h, w, source, args.passes, args.seed)?;
    println!(
        "grid {h}x{w}, source ({}, {}), passes {}",
        source.0, source.1, args.passes
    );
    println!(
        "influenced {} of {} tokens:",
        report.influenced.len(),
        h * w
    );
    let mut line = String::new();
    for (i, j) in &report.influenced {
        line.push_str(&format!("({i},{j}) "));
        if line.len() > 72 {
            println!("  {}", line.trim_end());
            line.clear();
        }
    }
    if !line.is_empty() {
        println!("  {}", line.trim_end());
    }
    Ok(ExitCode::SUCCESS)
}

struct CheckOutcome {
    name: &'static str,
    err: f64,
    tolerance: f64,
}

/// Weighted-sum loss so structural mistakes cannot vanish in a plain sum.
fn weighted_sum(tape: &mut Tape<f64>, y: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

/// Negative-control hook. The checker builds the analytic tape first and
/// then re-evaluates the function for the finite differences; scaling only
/// the first build makes the recorded gradients inconsistent with the
/// function being differenced, which the check must flag.
struct PerturbOnce {
    perturb: bool,
    first: bool,
}

impl PerturbOnce {
    fn new(perturb: bool) -> Self {
        Self {
            perturb,
            first: true,
        }
    }

    fn apply(&mut self, tape: &mut Tape<f64>, loss: NodeId) -> NodeId {
        if self.perturb && std::mem::take(&mut self.first) {
            tape.scale(loss, 1.001)
        } else {
            loss
        }
    }
}

fn check_ops(args: &GradcheckArgs, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(1));
    let x: Tensor<f64> = uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let wt: Tensor<f64> = uniform(&[3, 6], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_inputs(
        |tape, ids| {
            let y = tape.linear(ids[0], ids[1], None)?;
            let y = tape.gelu(y);
            let loss = weighted_sum(tape, y, &w)?;
            Ok(hook.apply(tape, loss))
        },
        &[x, wt],
        args.eps,
    )?;
    out.push(CheckOutcome {
        name: "ops linear+gelu",
        err,
        tolerance: 1e-4,
    });

    let a: Tensor<f64> = uniform(&[5, 4], -1.0, 1.0, &mut rng);
    let b: Tensor<f64> = uniform(&[4, 3], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[5, 3], -1.0, 1.0, &mut rng);
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_inputs(
        |tape, ids| {
            let y = tape.matmul(ids[0], ids[1])?;
            let loss = weighted_sum(tape, y, &w)?;
            Ok(hook.apply(tape, loss))
        },
        &[a, b],
        args.eps,
    )?;
    out.push(CheckOutcome {
        name: "ops matmul",
        err,
        tolerance: 1e-4,
    });
    Ok(())
}

fn check_layers(args: &GradcheckArgs, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(2));

    let mut store = ParamStore::<f64>::new();
    let linear = Linear::init(&mut store, &mut rng, "fc", 5, 4, true);
    let input: Tensor<f64> = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = linear.forward(tape, store, x)?;
            let loss = weighted_sum(tape, y, &w)?;
            Ok(hook.apply(tape, loss))
        },
        &mut store,
        args.eps,
        0,
        &mut rng,
    )?;
    out.push(CheckOutcome {
        name: "layer linear",
        err,
        tolerance: 1e-4,
    });

    let mut store = ParamStore::<f64>::new();
    let conv = DepthwiseConv3x3::init(&mut store, &mut rng, "dw", 3, true);
    *store.value_mut(conv.kernel) = uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
    let input: Tensor<f64> = uniform(&[2, 5, 4, 3], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[2, 5, 4, 3], -1.0, 1.0, &mut rng);
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = conv.forward(tape, store, x)?;
            let loss = weighted_sum(tape, y, &w)?;
            Ok(hook.apply(tape, loss))
        },
        &mut store,
        args.eps,
        0,
        &mut rng,
    )?;
    out.push(CheckOutcome {
        name: "layer dwconv3x3",
        err,
        tolerance: 1e-4,
    });

    let mut store = ParamStore::<f64>::new();
    let bn = NormLayer::init(&mut store, "bn", NormKind::Batch, 4);
    {
        let mut tape = Tape::new();
        let x = tape.leaf(uniform(&[4, 3, 3, 4], -2.0, 2.0, &mut rng));
        bn.forward(&mut tape, &mut store, x, Mode::Train)?;
    }
    let input: Tensor<f64> = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng);
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = bn.forward(tape, store, x, Mode::Eval)?;
            let loss = weighted_sum(tape, y, &w)?;
            Ok(hook.apply(tape, loss))
        },
        &mut store,
        args.eps,
        0,
        &mut rng,
    )?;
    out.push(CheckOutcome {
        name: "layer batchnorm (eval)",
        err,
        tolerance: 1e-4,
    });

    let mut store = ParamStore::<f64>::new();
    let ln = NormLayer::init(&mut store, "ln", NormKind::Layer, 6);
    let input: Tensor<f64> = uniform(&[5, 6], -2.0, 2.0, &mut rng);
    let w: Tensor<f64> = uniform(&[5, 6], -1.0, 1.0, &mut rng);
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = ln.forward(tape, store, x, Mode::Eval)?;
            let loss = weighted_sum(tape, y, &w)?;
            Ok(hook.apply(tape, loss))
        },
        &mut store,
        args.eps,
        0,
        &mut rng,
    )?;
    out.push(CheckOutcome {
        name: "layer layernorm",
        err,
        tolerance: 1e-4,
    });
    Ok(())
}

fn check_block(args: &GradcheckArgs, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(3));
    let mut store = ParamStore::<f64>::new();
    let block = SmlpBlock::init(
        &mut store,
        &mut rng,
        "smlp",
        8,
        8,
        4,
        SmlpSettings::default(),
    );
    let input: Tensor<f64> = uniform(&[8, 8, 4], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[8, 8, 4], -1.0, 1.0, &mut rng);
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = block.forward(tape, store, x)?;
            let loss = weighted_sum(tape, y, &w)?;
            Ok(hook.apply(tape, loss))
        },
        &mut store,
        args.eps,
        0,
        &mut rng,
    )?;
    out.push(CheckOutcome {
        name: "smlp block 8x8x4",
        err,
        tolerance: 1e-4,
    });
    Ok(())
}

fn check_model(args: &GradcheckArgs, out: &mut Vec<CheckOutcome>) -> Result<()> {
    let stages = match args.res {
        16 => vec![
            StageConfig::smlp(1),
            StageConfig::smlp(1),
            StageConfig::smlp(1),
        ],
        32 => vec![
            StageConfig::smlp(1),
            StageConfig::smlp(1),
            StageConfig::smlp(1),
            StageConfig::smlp(1),
        ],
        other => {
            return Err(Error::Config(format!(
                "model gradcheck supports --res 16 or 32, got {other}"
            )))
        }
    };
    let config = ModelConfig {
        name: format!("gradcheck-{}", args.res),
        img_h: args.res,
        img_w: args.res,
        patch: 4,
        embed_dim: 8,
        num_classes: 2,
        ffn_expansion: 2,
        droppath: 0.0,
        stages,
    };
    let mut model: Model<f64> = Model::build(config, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed.wrapping_add(4));
    let input: Tensor<f64> = uniform(&[1, args.res, args.res, 3], 0.0, 1.0, &mut rng);
    let logit_w: Tensor<f64> = uniform(&[1, 2], -1.0, 1.0, &mut rng);
    // one train-mode pass populates the batch-norm running statistics
    {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        model.forward(&mut tape, x, Mode::Train, None)?;
    }
    let Model { net, params, .. } = &mut model;
    let mut hook = PerturbOnce::new(args.perturb_backward);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let logits = net.forward(tape, store, x, Mode::Eval, None)?;
            let loss = weighted_sum(tape, logits, &logit_w)?;
            Ok(hook.apply(tape, loss))
        },
        params,
        args.eps,
        8,
        &mut rng,
    )?;
    out.push(CheckOutcome {
        name: "model end-to-end",
        err,
        tolerance: 1e-3,
    });
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut outcomes = Vec::new();
    match args.scope {
        Scope::Ops => check_ops(&args, &mut outcomes)?,
        Scope::Layers => check_layers(&args, &mut outcomes)?,
        Scope::Block => check_block(&args, &mut outcomes)?,
        Scope::Model => check_model(&args, &mut outcomes)?,
        Scope::All => {
            check_ops(&args, &mut outcomes)?;
            check_layers(&args, &mut outcomes)?;
            check_block(&args, &mut outcomes)?;
            check_model(&args, &mut outcomes)?;
        }
    }
    let mut failed = false;
    for outcome in &outcomes {
        let ok = outcome.err < outcome.tolerance;
        failed |= !ok;
        println!(
            "{:<24} max rel err {:>10.3e}  (tolerance {:.0e})  {}",
            outcome.name,
            outcome.err,
            outcome.tolerance,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed {
        println!("gradcheck: FAIL");
        Ok(ExitCode::from(1))
    } else {
        println!("gradcheck: PASS");
        Ok(ExitCode::SUCCESS)
    }
}

fn data_root(flag: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(path) = flag {
        return Ok(path);
    }
    if let Ok(env) = std::env::var("SMLP_DATA_DIR") {
        if !env.is_empty() {
            return Ok(PathBuf::from(env));
        }
    }
    Err(Error::Config(
        "no data path: pass --data or set SMLP_DATA_DIR".into(),
    ))
}

fn load_train_data(path: &Path) -> Result<Dataset> {
    if path.is_file() {
        load_file(path)
    } else if path.is_dir() {
        load_train_dir(path)
    } else {
        Err(Error::Config(format!(
            "data path {} does not exist",
            path.display()
        )))
    }
}

fn normalize_from(cfg: &TextConfig) -> Result<Normalize> {
    let mut norm = Normalize::default();
    if let Some(raw) = cfg.get("data", "mean") {
        let v: Vec<f64> = parse_list(raw)?;
        norm.mean = v
            .try_into()
            .map_err(|_| Error::Config("[data] mean needs three values".into()))?;
    }
    if let Some(raw) = cfg.get("data", "std") {
        let v: Vec<f64> = parse_list(raw)?;
        norm.std = v
            .try_into()
            .map_err(|_| Error::Config("[data] std needs three values".into()))?;
        if norm.std.contains(&0.0) {
            return Err(Error::Config("[data] std must be nonzero".into()));
        }
    }
    Ok(norm)
}

fn model_config_from(cfg: &TextConfig) -> Result<ModelConfig> {
    if let Some(variant) = cfg.get("model", "variant") {
        let height = cfg.parse_value::<usize>("model", "height")?;
        let width = cfg.parse_value::<usize>("model", "width")?;
        let overrides = Overrides {
            resolution: height.map(|h| (h, width.unwrap_or(h))),
            num_classes: cfg.parse_value("model", "num_classes")?,
            embed_dim: cfg.parse_value("model", "embed_dim")?,
            depths: cfg.get("model", "depths").map(parse_list).transpose()?,
            ffn_expansion: cfg.parse_value("model", "ffn_expansion")?,
            droppath: cfg.parse_value("model", "droppath")?,
            patch: cfg.parse_value("model", "patch")?,
            smlp_mask: cfg.get("model", "smlp_mask").map(parse_mask).transpose()?,
        };
        variant_config(variant, &overrides)
    } else {
        ModelConfig::from_config(cfg)
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let text = std::fs::read_to_string(&args.config)?;
    let cfg = TextConfig::parse(&text)?;
    let model_config = model_config_from(&cfg)?;
    let mut train_config = TrainConfig::from_config(&cfg)?;
    if let Some(epochs) = args.epochs {
        train_config.total_epochs = epochs;
    }
    if let Some(batch) = args.batch_size {
        train_config.batch_size = batch;
    }
    if let Some(seed) = args.seed {
        train_config.seed = seed;
    }
    if let Some(subset) = args.subset {
        train_config.subset = Some(subset);
    }
    train_config.validate()?;
    let norm = normalize_from(&cfg)?;

    let root = data_root(args.data)?;
    let train_set = load_train_data(&root)?;
    let eval_set = if root.is_dir() && root.join("test_batch.bin").exists() {
        Some(load_test_dir(&root)?)
    } else {
        None
    };

    std::fs::create_dir_all(&args.out)?;
    let mut model: Model<f32> = Model::build(model_config, train_config.seed)?;
    println!(
        "training {} ({} params) on {} samples{}",
        model.config.name,
        count_costs(&model).params,
        train_config
            .subset
            .map_or(train_set.len(), |n| n.min(train_set.len())),
        eval_set
            .as_ref()
            .map_or(String::new(), |e| format!(", evaluating on {}", e.len()))
    );

    let out_dir = args.out.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut hook = |m: &Model<f32>,
                    opt: &smlp::train::AdamState<f32>,
                    rng: &ChaCha8Rng,
                    log: &smlp::train::EpochLog|
     -> Result<()> {
        println!(
            "epoch {:>3}  lr {:>9.3e}  train_loss {:.4}  train_acc {:.4}  eval_acc {:.4}",
            log.epoch, log.lr, log.train_loss, log.train_acc, log.eval_acc
        );
        save_checkpoint(
            &out_dir.join("last.ckpt"),
            m,
            Some(opt),
            log.epoch,
            rng,
            &norm,
        )?;
        if log.eval_acc > best_acc {
            best_acc = log.eval_acc;
            save_checkpoint(
                &out_dir.join("best.ckpt"),
                m,
                Some(opt),
                log.epoch,
                rng,
                &norm,
            )?;
        }
        Ok(())
    };
    let (log, _, _) = train(
        &mut model,
        &train_set,
        eval_set.as_ref(),
        &train_config,
        &norm,
        Some(&mut hook),
    )?;
    std::fs::write(args.out.join("metrics.csv"), log.to_csv())?;
    println!(
        "done: checkpoints and metrics.csv in {}",
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let (mut model, _, _) = ckpt.restore()?;
    let root = data_root(args.data)?;
    let ds = if root.is_file() {
        load_file(&root)?
    } else if root.join("test_batch.bin").exists() {
        load_test_dir(&root)?
    } else {
        load_train_dir(&root)?
    };
    let (acc, loss) = evaluate(&mut model, &ds, &ckpt.norm, args.batch_size)?;
    println!(
        "top-1 accuracy {:.4} on {} samples (mean loss {:.4})",
        acc,
        ds.len(),
        loss
    );
    Ok(ExitCode::SUCCESS)
}

//! `gradprune`: train the toy decoder, run pruning experiments, sweep
//! hyperparameters, print cost accounting and saliency statistics.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gradprune::cost::{cost_report, CostQuery};
use gradprune::harness::experiment::{
    eval_dataset, load_model, rows_to_jsonl, rows_to_table, run_experiment_with_traces, stats_to_table,
    sweep_to_table, train_from_config, write_jsonl,
};
use gradprune::harness::{saliency_stats, sweep, ExperimentConfig, SweepAxis};
use gradprune::{checkpoint, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "gradprune", version, about = "Gradient-saliency visual token pruning on a toy decoder")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed (the training seed for `train`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output path (the checkpoint for `train`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the toy model and write a checkpoint.
    Train,
    /// Evaluate every configured selector and write a JSON-lines report.
    PruneEval,
    /// Closed-form FLOPs and KV-cache accounting.
    Cost(CostArgs),
    /// Re-run the evaluation over one swept hyperparameter.
    Sweep(SweepArgs),
    /// Per-layer saliency statistics of the unpruned model.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
struct CostArgs {
    #[arg(long)]
    hidden: Option<u64>,
    #[arg(long)]
    ffn: Option<u64>,
    #[arg(long)]
    layers: Option<u64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Stage layers, comma separated.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<u64>>,
    /// Token count before the first stage followed by the count after each
    /// stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    tokens: Option<Vec<u64>>,
    #[arg(long)]
    bytes_per_element: Option<u64>,
    /// Extra cached tokens per layer (text, generated tokens).
    #[arg(long, default_value_t = 0)]
    kv_extra: u64,
    /// Print only the JSON record.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// kpos, tau or budget.
    #[arg(long)]
    axis: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Layers to probe; every layer when omitted.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn train(cli: &Cli, mut cfg: ExperimentConfig) -> Result<()> {
    if let Some(s) = cli.seed {
        cfg.train_seed = s;
    }
    if let Some(p) = &cli.out {
        cfg.checkpoint = p.clone();
    }
    let outcome = train_from_config(&cfg)?;
    for (epoch, loss) in outcome.epoch_losses.iter().enumerate() {
        println!("epoch {:>3}  loss {loss:.5}", epoch + 1);
    }
    println!("held-out accuracy {:.4}", outcome.heldout_accuracy);
    checkpoint::save(&cfg.checkpoint, &outcome.model)?;
    println!("wrote {}", cfg.checkpoint.display());
    Ok(())
}

fn apply_run_overrides(cli: &Cli, cfg: &mut ExperimentConfig) {
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = &cli.out {
        cfg.out = p.clone();
    }
}

fn prune_eval(cli: &Cli, mut cfg: ExperimentConfig) -> Result<()> {
    apply_run_overrides(cli, &mut cfg);
    let model = load_model(&cfg)?;
    let data = eval_dataset(&cfg)?;
    let (rows, traces) = run_experiment_with_traces(&cfg, &model, &data)?;
    std::fs::write(&cfg.out, rows_to_jsonl(&rows))?;
    if let Some(path) = &cfg.traces {
        write_jsonl(path, &traces)?;
    }
    print!("{}", rows_to_table(&rows));
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn cost(cli: &Cli, cfg: ExperimentConfig, args: &CostArgs) -> Result<()> {
    let mut cc = cfg.cost_config();
    cc.hidden = args.hidden.unwrap_or(cc.hidden);
    cc.ffn = args.ffn.unwrap_or(cc.ffn);
    cc.layers = args.layers.unwrap_or(cc.layers);
    cc.gamma = args.gamma.unwrap_or(cc.gamma);
    cc.bytes_per_element = args.bytes_per_element.unwrap_or(cc.bytes_per_element);

    let (schedule, tokens) = match (&args.schedule, &args.tokens) {
        (Some(s), Some(t)) => (s.clone(), t.clone()),
        (None, None) => {
            let sched = cfg.schedule()?;
            let text = cfg.text_len as u64;
            let mut tokens = vec![cfg.visual_count as u64 + text];
            tokens.extend(sched.keeps().iter().map(|&k| k as u64 + text));
            (sched.layers().iter().map(|&l| l as u64).collect(), tokens)
        }
        _ => return Err(Error::Config("give --schedule and --tokens together".into())),
    };
    let report = cost_report(
        &cc,
        &CostQuery {
            schedule: &schedule,
            tokens: &tokens,
            kv_extra_tokens: args.kv_extra,
            nms_scan_macs: None,
        },
    )?;
    let json = serde_json::to_string(&report).map_err(|e| Error::Io(e.into()))?;
    if !args.json {
        print!("{}", report.to_table());
    }
    println!("{json}");
    if let Some(p) = &cli.out {
        std::fs::write(p, json + "\n")?;
    }
    Ok(())
}

fn run_sweep(cli: &Cli, mut cfg: ExperimentConfig, args: &SweepArgs) -> Result<()> {
    apply_run_overrides(cli, &mut cfg);
    let axis = SweepAxis::parse(&args.axis)?;
    let model = load_model(&cfg)?;
    let data = eval_dataset(&cfg)?;
    let entries = sweep(&cfg, &model, &data, axis, &args.values)?;
    write_jsonl(&cfg.out, &entries)?;
    print!("{}", sweep_to_table(&entries));
    println!("wrote {}", cfg.out.display());
    Ok(())
}

fn stats(cli: &Cli, mut cfg: ExperimentConfig, args: &StatsArgs) -> Result<()> {
    apply_run_overrides(cli, &mut cfg);
    let model = load_model(&cfg)?;
    let data = eval_dataset(&cfg)?;
    let layers = args.layers.clone().unwrap_or_else(|| (1..=cfg.layers).collect());
    let rows = saliency_stats(&model, &data, &layers, cfg.kpos, cfg.head_norm)?;
    print!("{}", stats_to_table(&rows));
    if cli.out.is_some() {
        write_jsonl(&cfg.out, &rows)?;
        println!("wrote {}", cfg.out.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train => train(cli, cfg),
        Command::PruneEval => prune_eval(cli, cfg),
        Command::Cost(a) => cost(cli, cfg, a),
        Command::Sweep(a) => run_sweep(cli, cfg, a),
        Command::Stats(a) => stats(cli, cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flop_core::metrics::read_records;
use flop_core::report::summary_table;
use flop_core::{
    bench, bench_compacted, BenchOptions, CharCorpus, Checkpoint, Error, Method, MetricsWriter, PruneReport, Record, Result,
    RunConfig, Split, SummaryRow, Trainer,
};

#[derive(Parser)]
#[command(name = "flop", version, about = "Structured low-rank pruning of recurrent character language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dense warmup (or full training for `fac`); writes a checkpoint and metrics.
    Train(RunArgs),
    /// Pruning phase, resumed from a warmup checkpoint or preceded by an inline warmup.
    Prune {
        #[command(flatten)]
        run: RunArgs,
        /// Warmup checkpoint written by `train`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Folds gates into smaller dense factors.
    Compact {
        /// Pruned checkpoint.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, env = "FLOP_OUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Bits per character on one split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to evaluate; a freshly initialized model otherwise.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "valid")]
        split: Split,
    },
    /// Times compacted layers against the full-rank factorization.
    Bench(BenchArgs),
    /// Summary table over finished runs.
    Report {
        /// Metrics files or run directories containing `metrics.jsonl`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// flop-l0, flop-agp, np-l0 or fac.
    #[arg(long)]
    method: Option<Method>,
    /// Fraction of parameters to remove, in [0, 1].
    #[arg(long)]
    target_compression: Option<f64>,
    /// Run directory for checkpoints and `metrics.jsonl` [default: flop-out].
    #[arg(long, env = "FLOP_OUT_DIR")]
    out: Option<PathBuf>,
    /// Text file to train on; overrides `corpus.path`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Total training steps; overrides `train.steps`.
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 3056)]
    d_out: usize,
    #[arg(long, default_value_t = 3056)]
    d_in: usize,
    #[arg(long, default_value_t = 512)]
    rank: usize,
    /// Kept ranks to time; defaults to 10%, 20%, 50% and 100% of `rank`.
    #[arg(long, value_delimiter = ',')]
    kept: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    trials: usize,
    #[arg(long, default_value_t = 5)]
    warmup: usize,
    /// Worker threads; 1 keeps the timing loop single-threaded.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for `bench.jsonl`.
    #[arg(long, env = "FLOP_OUT_DIR")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        self.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(c) = self.target_compression {
            cfg.prune.target_compression = c;
        }
        if let Some(p) = &self.corpus {
            cfg.corpus.path = Some(p.clone());
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = Some(o.clone());
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("flop-out"));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn corpus_for(cfg: &RunConfig, ck: Option<&Checkpoint>) -> Result<CharCorpus> {
    let corpus = cfg.load_corpus()?;
    if let Some(ck) = ck {
        if corpus.vocab != ck.vocab {
            return Err(Error::Corpus("vocabulary differs from the checkpoint's; use the corpus it was trained on".into()));
        }
    }
    Ok(corpus)
}

fn run_phase(trainer: &mut Trainer, corpus: &CharCorpus, end: u64, metrics: &mut MetricsWriter) -> Result<()> {
    trainer.run_until(corpus, end, |m| {
        if m.step % 50 == 0 {
            log::info!("step {} loss {:.4} s {:.0}", m.step, m.loss, m.expected_size);
        }
        metrics.emit(&m.to_record()?)
    })
}

fn final_record(trainer: &Trainer, corpus: &CharCorpus, report: &PruneReport) -> Result<Record> {
    let mut rec = report.to_record()?;
    rec.text("event", "final");
    rec.text("method", trainer.method.as_str());
    rec.int("step", trainer.step);
    rec.num("valid_bpc", trainer.evaluate(corpus, Split::Valid)?)?;
    Ok(rec)
}

fn finish(trainer: &Trainer, cfg: &RunConfig, corpus: &CharCorpus, path: &Path, metrics: &mut MetricsWriter) -> Result<()> {
    let report = PruneReport::from_model(&trainer.model);
    let rec = final_record(trainer, corpus, &report)?;
    metrics.emit(&rec)?;
    Checkpoint {
        config: cfg.clone(),
        vocab: corpus.vocab.clone(),
        model: trainer.model.clone(),
        train: Some(trainer.snapshot()),
    }
    .save(path)?;
    print!("{}", report.table());
    println!("valid bpc {:.4}", rec.get_f64("valid_bpc").unwrap_or(f64::NAN));
    println!("checkpoint {}", path.display());
    Ok(())
}

fn train(args: &RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let corpus = corpus_for(&cfg, None)?;
    let dir = out_dir(&cfg)?;
    let mut trainer = Trainer::new(&cfg, &corpus)?;
    let mut metrics = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    let end = trainer.warmup_steps;
    run_phase(&mut trainer, &corpus, end, &mut metrics)?;
    if cfg.method == Method::Fac {
        return finish(&trainer, &cfg, &corpus, &dir.join("final.ckpt"), &mut metrics);
    }
    let path = dir.join("warmup.ckpt");
    Checkpoint {
        config: cfg,
        vocab: corpus.vocab.clone(),
        model: trainer.model.clone(),
        train: Some(trainer.snapshot()),
    }
    .save(&path)?;
    println!("warmup done after {} steps; checkpoint {}", trainer.step, path.display());
    Ok(())
}

fn prune(args: &RunArgs, from: Option<&Path>) -> Result<()> {
    let (cfg, corpus, mut trainer, mut metrics) = match from {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut cfg = ck.config.clone();
            if args.config.is_some() {
                return Err(Error::Config("--config cannot be combined with --from; the checkpoint carries its config".into()));
            }
            args.apply(&mut cfg);
            let corpus = corpus_for(&cfg, Some(&ck))?;
            let state = ck.train.ok_or_else(|| Error::Checkpoint(format!("{} holds no training state", path.display())))?;
            let mut trainer = Trainer::restore(&cfg, ck.model, state)?;
            trainer.retarget(&cfg)?;
            let metrics = MetricsWriter::append(&out_dir(&cfg)?.join("metrics.jsonl"))?;
            (cfg, corpus, trainer, metrics)
        }
        None => {
            let cfg = args.config()?;
            let corpus = corpus_for(&cfg, None)?;
            let trainer = Trainer::new(&cfg, &corpus)?;
            let metrics = MetricsWriter::create(&out_dir(&cfg)?.join("metrics.jsonl"))?;
            (cfg, corpus, trainer, metrics)
        }
    };
    if cfg.method == Method::Fac {
        return Err(Error::Config("fac has no pruning phase; use `train`".into()));
    }
    let dir = out_dir(&cfg)?;
    let end = trainer.total_steps;
    run_phase(&mut trainer, &corpus, end, &mut metrics)?;
    finish(&trainer, &cfg, &corpus, &dir.join("pruned.ckpt"), &mut metrics)
}

fn compact(from: &Path, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(from)?;
    let model = ck.model.compact();
    let before = ck.model.count();
    let after = model.count();
    let mut config = ck.config;
    if let Some(o) = out {
        config.out_dir = Some(o.to_path_buf());
    }
    let path = out_dir(&config)?.join("compact.ckpt");
    Checkpoint {
        config,
        vocab: ck.vocab,
        model,
        train: None,
    }
    .save(&path)?;
    println!("parameters {} -> {}; checkpoint {}", before.total, after.total, path.display());
    Ok(())
}

fn eval(args: &RunArgs, checkpoint: Option<&Path>, split: Split) -> Result<()> {
    let bpc = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut cfg = ck.config.clone();
            args.apply(&mut cfg);
            let corpus = corpus_for(&cfg, Some(&ck))?;
            ck.model.bpc(corpus.split(split), cfg.train.eval_chunk)?
        }
        None => {
            let cfg = args.config()?;
            let corpus = corpus_for(&cfg, None)?;
            Trainer::new(&cfg, &corpus)?.evaluate(&corpus, split)?
        }
    };
    println!("bpc {bpc:.6}");
    Ok(())
}

fn run_bench(a: &BenchArgs) -> Result<()> {
    let kept = if a.kept.is_empty() {
        [0.1, 0.2, 0.5, 1.0].iter().map(|f| ((a.rank as f64 * f).round() as usize).max(1)).collect()
    } else {
        a.kept.clone()
    };
    let opts = BenchOptions {
        trials: a.trials,
        warmup: a.warmup,
        threads: a.threads,
        seed: a.seed,
    };
    let results = bench_compacted(a.d_out, a.d_in, a.rank, &kept, a.batch, &opts)?;
    print!("{}", bench::bench_table(&results));
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let mut w = MetricsWriter::create(&dir.join("bench.jsonl"))?;
        for r in &results {
            w.emit(&r.to_record()?)?;
        }
    }
    Ok(())
}

fn report(runs: &[PathBuf]) -> Result<()> {
    let mut rows = Vec::new();
    for run in runs {
        let file = if run.is_dir() { run.join("metrics.jsonl") } else { run.clone() };
        let records = read_records(&file)?;
        let last = records
            .iter()
            .rev()
            .find(|r| r.get_str("method").is_some())
            .ok_or_else(|| Error::Metrics(format!("{} has no final record", file.display())))?;
        let name = if run.is_dir() { run } else { run.parent().unwrap_or(run) };
        rows.push(SummaryRow::from_record(&name.display().to_string(), last));
    }
    print!("{}", summary_table(&rows));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => train(a),
        Command::Prune { run, from } => prune(run, from.as_deref()),
        Command::Compact { from, out } => compact(from, out.as_deref()),
        Command::Eval { run, checkpoint, split } => eval(run, checkpoint.as_deref(), *split),
        Command::Bench(a) => run_bench(a),
        Command::Report { runs } => report(runs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

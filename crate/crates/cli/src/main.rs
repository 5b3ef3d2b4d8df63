use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lorafuse::config::RunConfig;
use lorafuse::fusion::FusionLevel;
use lorafuse::metrics::{evaluate_documents, DaleChallList, EvalInputs, Metric};
use lorafuse::pipeline::{
    build_signatures, export_embeddings, fused_generator, initial_encoder, paraphrase_lines, prepare_data,
    run_ablation, train_base, train_domain_adapters, train_encoder_stage, train_unified_adapter, write_corpus_files,
    write_text, Data, Layout, StageLoss,
};
use lorafuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "lorafuse",
    version,
    about = "Routed and fused low-rank adapters on a toy language model"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    #[arg(long, global = true)]
    beta: Option<f64>,

    #[arg(long, global = true)]
    clusters: Option<usize>,

    /// L1-normalise adapter weights.
    #[arg(long, global = true, conflicts_with = "no_normalize_weights")]
    normalize_weights: bool,

    /// Keep adapter weights raw (the default).
    #[arg(long, global = true)]
    no_normalize_weights: bool,

    #[arg(long, global = true, value_enum)]
    fusion_level: Option<LevelArg>,

    #[arg(long, global = true)]
    model_dir: Option<PathBuf>,

    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    /// JSONL corpus instead of the synthetic generator.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,

    /// Any configuration key, as `KEY=VALUE`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Logits,
    Params,
}

#[derive(Subcommand)]
enum Command {
    /// Write the corpus, its splits and per-domain split counts to `data_dir`.
    GenCorpus,
    /// Train one stage (or all of them) and write its artifacts.
    Train {
        #[arg(value_enum)]
        what: Stage,
    },
    /// Fused paraphrase of every input line.
    Paraphrase {
        /// Input file; stdin when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score system outputs against references.
    Eval {
        #[arg(long)]
        outputs: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Source texts, required for SARI.
        #[arg(long)]
        sources: Option<PathBuf>,
        /// Comma-separated metric names; defaults to every metric whose inputs are available.
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
        /// Per-document CSV; stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// JSON summary of corpus means.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Held-out ablation table over every pipeline variant.
    Ablate {
        /// CSV output; a fixed-width table goes to stdout either way.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Encoder embeddings of one split as CSV.
    ExportEmbeddings {
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Use the encoder before contrastive training.
        #[arg(long)]
        initial: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    Base,
    DomainLoras,
    UnifiedLora,
    Encoder,
    Signatures,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &o.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(b) = o.beta {
        cfg.beta = b;
    }
    if let Some(k) = o.clusters {
        cfg.clusters = k;
    }
    if o.normalize_weights {
        cfg.normalize_weights = true;
    }
    if o.no_normalize_weights {
        cfg.normalize_weights = false;
    }
    if let Some(l) = o.fusion_level {
        cfg.fusion_level = match l {
            LevelArg::Logits => FusionLevel::Logits,
            LevelArg::Params => FusionLevel::Params,
        };
    }
    if let Some(d) = &o.model_dir {
        cfg.model_dir = d.clone();
    }
    if let Some(d) = &o.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(c) = &o.corpus {
        cfg.corpus = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(loss: &StageLoss) {
    println!("{}: loss {:.6} -> {:.6}", loss.name, loss.initial, loss.final_loss);
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write_text(p, text),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn train(cfg: &RunConfig, data: &Data, what: Stage) -> Result<()> {
    let layout = Layout::new(cfg);
    layout.save_domains(&data.domains)?;
    write_text(&cfg.model_dir.join("run.conf"), &cfg.to_text())?;
    let all = what == Stage::All;
    if all || what == Stage::Base {
        let (model, loss) = train_base(cfg, data)?;
        report(&loss);
        layout.save_base(&model)?;
    }
    if all || what == Stage::DomainLoras {
        let model = layout.load_base()?;
        let (adapters, losses) = train_domain_adapters(cfg, &model, data)?;
        losses.iter().for_each(report);
        layout.save_adapters(&adapters)?;
    }
    if all || what == Stage::UnifiedLora {
        let model = layout.load_base()?;
        let (adapter, loss) = train_unified_adapter(cfg, &model, data)?;
        report(&loss);
        layout.save_unified(&adapter)?;
    }
    if all || what == Stage::Encoder {
        let (encoder, loss) = train_encoder_stage(cfg, data)?;
        report(&loss);
        layout.save_encoder(&encoder)?;
    }
    if all || what == Stage::Signatures {
        let encoder = layout.load_encoder()?;
        let signatures = build_signatures(cfg, &encoder, data)?;
        for s in &signatures {
            println!("signature {}: k = {}", s.domain_id, s.k_used);
        }
        layout.save_signatures(&signatures)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.overrides)?;
    match cli.command {
        Command::GenCorpus => {
            let data = prepare_data(&cfg)?;
            for path in write_corpus_files(&cfg, &data)? {
                println!("{}", path.display());
            }
        }
        Command::Train { what } => train(&cfg, &prepare_data(&cfg)?, what)?,
        Command::Paraphrase { input, output } => {
            let text = match &input {
                Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
                None => {
                    let mut s = String::new();
                    io::stdin()
                        .read_to_string(&mut s)
                        .map_err(|e| Error::io("<stdin>", e))?;
                    s
                }
            };
            let generator = fused_generator(&cfg, &Layout::new(&cfg).load_all()?)?;
            let mut out = paraphrase_lines(&generator, &text)?.join("\n");
            if !out.is_empty() {
                out.push('\n');
            }
            emit(output.as_deref(), &out)?;
        }
        Command::Eval {
            outputs,
            references,
            sources,
            metrics,
            csv,
            json,
        } => {
            let outputs = read_lines(&outputs)?;
            let references = read_lines(&references)?;
            let sources = sources.as_deref().map(read_lines).transpose()?;
            let word_list = cfg.word_list.as_deref().map(DaleChallList::load).transpose()?;
            let metrics: Vec<Metric> = if metrics.is_empty() {
                Metric::ALL
                    .into_iter()
                    .filter(|m| match m {
                        Metric::Sari => sources.is_some(),
                        Metric::Dcrs => word_list.is_some(),
                        _ => true,
                    })
                    .collect()
            } else {
                metrics.iter().map(|m| m.parse()).collect::<Result<_>>()?
            };
            let inputs = EvalInputs {
                outputs: &outputs,
                references: &references,
                sources: sources.as_deref(),
                word_list: word_list.as_ref(),
            };
            let report = evaluate_documents(&inputs, &metrics)?.to_percent();
            emit(csv.as_deref(), &report.to_csv())?;
            if let Some(p) = json {
                write_text(&p, &report.summary_json())?;
            }
        }
        Command::Ablate { output } => {
            let data = prepare_data(&cfg)?;
            let table = run_ablation(&cfg, &data, &Layout::new(&cfg).load_all()?)?;
            print!("{}", table.to_text());
            if let Some(p) = output {
                write_text(&p, &table.to_csv())?;
            }
        }
        Command::ExportEmbeddings { split, initial, output } => {
            let data = prepare_data(&cfg)?;
            let encoder = if initial {
                initial_encoder(&cfg)?
            } else {
                Layout::new(&cfg).load_encoder()?
            };
            let corpus = match split {
                SplitArg::Train => &data.splits.train,
                SplitArg::Valid => &data.splits.valid,
                SplitArg::Test => &data.splits.test,
            };
            emit(output.as_deref(), &export_embeddings(&encoder, corpus))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

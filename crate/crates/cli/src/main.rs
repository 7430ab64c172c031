use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use logvig::graphkit::{build_grid, build_knn_adjacency, Adjacency, GraphKind};
use logvig::graphstat::{analyze, construction_bench, BenchConfig, PathReport};
use logvig::tensor::{Precision, Scalar};
use logvig::toytrain::{ablation, ablation_to_csv, log_to_csv, run_toy, AdamW, TrainConfig};
use logvig::verify::{run_suite, Suite, SuiteReport};
use logvig::vigblocks::{summarize, GrapherKind, Model, ModelConfig, ModelSummary, Variant};

#[derive(Parser)]
#[command(name = "logvig", version, about = "Graph construction statistics and LogViG model tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output encoding; each command has its own default.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Write to this file instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scalar precision; falls back to LOGVIG_PRECISION, then double.
    #[arg(long, global = true)]
    precision: Option<Precision>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Average shortest path and degree table per graph kind and resolution.
    Analyze {
        #[arg(long, value_delimiter = ',', default_value = "lsgc,svga,lattice")]
        kinds: Vec<GraphKind>,
        #[arg(long, value_delimiter = ',', default_value = "7,14,28,56")]
        resolutions: Vec<usize>,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Adjacency lists of one graph.
    DumpGraph {
        #[arg(long)]
        kind: GraphKind,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        /// Expansion rate, or the neighbour count for knn.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Feature dimension of the random knn points.
        #[arg(long, default_value_t = 16)]
        dim: usize,
    },
    /// Parameter count, GMACs and per-stage layout of a model preset.
    ModelSummary {
        #[arg(long, default_value = "ti")]
        variant: Variant,
        #[arg(long)]
        no_hrs: bool,
        #[arg(long, default_value = "lsgc")]
        grapher: GrapherKind,
        /// Stages keeping their grapher blocks, e.g. 4, 234 or 1234.
        #[arg(long, default_value = "1234")]
        stages: String,
        /// JSON model config; overrides the preset flags.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Runs a property suite and reports every check.
    Verify {
        #[arg(long, value_delimiter = ',', default_value = "oracle,gradcheck,equivariance,shapes")]
        suite: Vec<Suite>,
    },
    /// Trains a model on the synthetic template task.
    TrainToy {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value = "micro")]
        variant: Variant,
        #[arg(long, default_value = "lsgc")]
        grapher: GrapherKind,
        #[arg(long)]
        no_hrs: bool,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 512)]
        samples: usize,
        /// Also write the final metrics JSON here.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Train every grapher kind with and without the shortcut and print
        /// a comparison table instead of a log.
        #[arg(long)]
        ablation: bool,
    },
    /// Times graph construction per kind and resolution.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "7,14,28,56")]
        resolutions: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "lsgc,svga,knn")]
        kinds: Vec<GraphKind>,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
}

/// Text to emit plus whether the command should exit nonzero.
struct Output {
    text: String,
    failed: bool,
}

impl Output {
    fn ok(text: String) -> Self {
        Self { text, failed: false }
    }
}

fn json<T: Serialize + ?Sized>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn parse_stages(s: &str) -> Result<Vec<usize>> {
    s.chars()
        .filter(|c| *c != ',')
        .map(|c| match c.to_digit(10) {
            Some(d @ 1..=4) => Ok(d as usize),
            _ => bail!("invalid stage list '{s}'; use digits 1-4 such as 4, 234 or 1234"),
        })
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "disconnected".into(), |x| x.to_string())
}

fn analyze_cmd(kinds: &[GraphKind], resolutions: &[usize], k: usize, format: Format) -> Result<Output> {
    let rows: Vec<PathReport> = analyze(kinds, resolutions, k)?;
    let failed = rows.iter().any(|r| r.avg_shortest_path.is_none());
    let text = match format {
        Format::Json => json(&rows)?,
        Format::Csv => {
            let mut s = String::from("kind,resolution,avg_shortest_path,min_degree,max_degree,directed_edges\n");
            for r in &rows {
                writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    r.kind,
                    r.resolution,
                    fmt_opt(r.avg_shortest_path),
                    r.min_degree,
                    r.max_degree,
                    r.directed_edge_count
                )?;
            }
            s
        }
    };
    Ok(Output { text, failed })
}

fn dump_graph_cmd(kind: GraphKind, h: usize, w: usize, k: usize, dim: usize, seed: u64, format: Format) -> Result<Output> {
    let adj: Adjacency = if kind == GraphKind::Knn {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features: Vec<f64> = (0..h * w * dim).map(|_| rng.gen()).collect();
        let mut adj = build_knn_adjacency(&features, dim, k)?;
        adj.height = h;
        adj.width = w;
        adj
    } else {
        build_grid(kind, h, w, k)?
    };
    let text = match format {
        Format::Json => adj.to_json() + "\n",
        Format::Csv => {
            let mut s = String::from("from,to\n");
            for (p, ns) in adj.neighbors.iter().enumerate() {
                for q in ns {
                    writeln!(s, "{p},{q}")?;
                }
            }
            s
        }
    };
    Ok(Output::ok(text))
}

fn summary_for<T: Scalar>(config: ModelConfig, seed: u64) -> Result<ModelSummary> {
    Ok(summarize(&Model::<T>::new(config, seed)?)?)
}

fn model_summary_cmd(config: ModelConfig, seed: u64, precision: Precision, format: Format) -> Result<Output> {
    let summary = match precision {
        Precision::Single => summary_for::<f32>(config, seed)?,
        Precision::Double => summary_for::<f64>(config, seed)?,
    };
    let text = match format {
        Format::Json => json(&summary)?,
        Format::Csv => {
            let mut s = String::from("block,params,macs,channels,height,width\n");
            for b in &summary.blocks {
                let [_, c, h, w] = b.output_shape;
                writeln!(s, "{},{},{},{c},{h},{w}", b.name, b.params, b.macs)?;
            }
            let macs = (summary.gmacs * 1e9).round() as u64;
            writeln!(s, "total,{},{macs},,,", summary.params)?;
            s
        }
    };
    Ok(Output::ok(text))
}

fn verify_cmd(suites: &[Suite], seed: u64, format: Format) -> Result<Output> {
    let reports: Vec<SuiteReport> = suites.iter().map(|&s| run_suite(s, seed)).collect::<logvig::Result<_>>()?;
    let failed = reports.iter().any(|r| !r.passed());
    let text = match format {
        Format::Json => json(&reports)?,
        Format::Csv => {
            let mut s = String::from("suite,check,result,detail\n");
            for r in &reports {
                for c in &r.checks {
                    let result = if c.passed { "pass" } else { "fail" };
                    writeln!(s, "{},{},{result},\"{}\"", r.suite, c.name, c.detail.replace('"', "'"))?;
                }
            }
            s
        }
    };
    Ok(Output { text, failed })
}

#[derive(Serialize)]
struct TrainJson<'a> {
    final_acc: f64,
    steps: usize,
    seed: u64,
    heldout_acc: f64,
    final_loss: f64,
    log: &'a [logvig::toytrain::LogRow],
}

fn train_toy_for<T: Scalar>(
    config: ModelConfig,
    cfg: &TrainConfig,
    samples: usize,
    format: Format,
    ablate: bool,
    metrics_path: Option<&PathBuf>,
) -> Result<Output> {
    if ablate {
        let rows = ablation::<T>(&config, cfg, samples)?;
        let text = match format {
            Format::Json => json(&rows)?,
            Format::Csv => ablation_to_csv(&rows),
        };
        return Ok(Output::ok(text));
    }
    let run = run_toy::<T>(config, cfg, samples)?;
    if let Some(p) = metrics_path {
        fs::write(p, json(&run.metrics)?).with_context(|| format!("writing {}", p.display()))?;
    }
    let text = match format {
        Format::Csv => log_to_csv(&run.log),
        Format::Json => json(&TrainJson {
            final_acc: run.metrics.final_acc,
            steps: run.metrics.steps,
            seed: run.metrics.seed,
            heldout_acc: run.metrics.heldout_acc,
            final_loss: run.metrics.final_loss,
            log: &run.log,
        })?,
    };
    Ok(Output::ok(text))
}

fn bench_cmd(cfg: &BenchConfig, format: Format) -> Result<Output> {
    let rows = construction_bench(cfg)?;
    let text = match format {
        Format::Json => json(&rows)?,
        Format::Csv => {
            let mut s = String::from("kind,resolution,nodes,median_seconds,directed_edges\n");
            for r in &rows {
                writeln!(s, "{},{},{},{},{}", r.kind, r.resolution, r.nodes, r.median_seconds, r.directed_edges)?;
            }
            s
        }
    };
    Ok(Output::ok(text))
}

fn run(cli: Cli) -> Result<Output> {
    let Common {
        seed,
        format,
        precision,
        ..
    } = cli.common;
    let precision = match precision {
        Some(p) => p,
        None => Precision::from_env()?,
    };
    match cli.command {
        Command::Analyze { kinds, resolutions, k } => {
            analyze_cmd(&kinds, &resolutions, k, format.unwrap_or(Format::Csv))
        }
        Command::DumpGraph { kind, h, w, k, dim } => {
            dump_graph_cmd(kind, h, w, k, dim, seed, format.unwrap_or(Format::Json))
        }
        Command::ModelSummary {
            variant,
            no_hrs,
            grapher,
            stages,
            config,
        } => {
            let config = match config {
                Some(path) => {
                    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    ModelConfig::from_json(&text)?
                }
                None => ModelConfig::preset(variant)
                    .with_hrs(!no_hrs)
                    .with_grapher(grapher)
                    .with_grapher_stages(parse_stages(&stages)?),
            };
            config.validate()?;
            model_summary_cmd(config, seed, precision, format.unwrap_or(Format::Json))
        }
        Command::Verify { suite } => verify_cmd(&suite, seed, format.unwrap_or(Format::Csv)),
        Command::TrainToy {
            steps,
            variant,
            grapher,
            no_hrs,
            batch,
            lr,
            samples,
            metrics,
            ablation,
        } => {
            let config = ModelConfig::preset(variant).with_grapher(grapher).with_hrs(!no_hrs);
            let cfg = TrainConfig {
                steps,
                batch,
                optimizer: AdamW { lr, ..AdamW::default() },
                seed,
            };
            let format = format.unwrap_or(Format::Csv);
            match precision {
                Precision::Single => train_toy_for::<f32>(config, &cfg, samples, format, ablation, metrics.as_ref()),
                Precision::Double => train_toy_for::<f64>(config, &cfg, samples, format, ablation, metrics.as_ref()),
            }
        }
        Command::Bench {
            resolutions,
            kinds,
            trials,
            k,
        } => {
            let cfg = BenchConfig {
                resolutions,
                kinds,
                k,
                trials,
                seed,
                ..BenchConfig::default()
            };
            bench_cmd(&cfg, format.unwrap_or(Format::Csv))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out_path = cli.common.out.clone();
    match run(cli) {
        Ok(out) => {
            let written = match &out_path {
                Some(p) => fs::write(p, &out.text).with_context(|| format!("writing {}", p.display())),
                None => {
                    print!("{}", out.text);
                    Ok(())
                }
            };
            if let Err(e) = written {
                eprintln!("error: {e:#}");
                return ExitCode::FAILURE;
            }
            if out.failed {
                eprintln!("error: one or more checks failed");
                return ExitCode::FAILURE;
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

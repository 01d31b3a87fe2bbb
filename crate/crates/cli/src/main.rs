use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use vtelim_core::pipeline::{self, OptimizeConfig, OracleChoice, Optimized};
use vtelim_core::{CompGraph, MachineParams};

#[derive(Parser)]
#[command(name = "vtelim", version, about = "Eliminate data-movement operators with virtual tensors")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pick a strategy and write report.json / decisions.jsonl.
    Optimize {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Re-execute the graph under the strategy and demand bit equality.
        #[arg(long)]
        verify: bool,
        #[arg(long)]
        emit_dot: bool,
    },
    /// Optimize, then check the strategy against the all-physical run.
    Verify {
        #[command(flatten)]
        run: RunArgs,
        /// Test hook: corrupt one resolved map before executing.
        #[arg(long, hide = true)]
        corrupt_map: bool,
    },
    /// Modeled time split between data-movement and compute kernels.
    Breakdown {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Write vtog.dot and ptg.dot (or print the VTOG when --out is absent).
    Dot {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Analytic,
    Timed,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Machine parameters (TOML or JSON).
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "analytic")]
    oracle: OracleArg,
    /// Repetitions per measurement for the timed oracle.
    #[arg(long, default_value_t = 3)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Commit an edge (`e3` or `a->b`) before the search; repeatable.
    #[arg(long = "force-edge")]
    force_edge: Vec<String>,
    /// Also enumerate up to N strategies and compare greedy to the best.
    #[arg(long)]
    enumerate_limit: Option<usize>,
}

impl RunArgs {
    fn load(&self) -> Result<(CompGraph, OptimizeConfig)> {
        let text = fs::read_to_string(&self.graph).with_context(|| format!("reading {}", self.graph.display()))?;
        let g = CompGraph::parse_json(&text).with_context(|| format!("parsing {}", self.graph.display()))?;
        let params = match &self.params {
            Some(p) => MachineParams::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => MachineParams::default(),
        };
        let oracle = match self.oracle {
            OracleArg::Analytic => OracleChoice::Analytic,
            OracleArg::Timed => {
                if self.trials < 3 {
                    bail!("--oracle timed needs --trials >= 3 (got {})", self.trials);
                }
                OracleChoice::Timed { trials: self.trials }
            }
        };
        let cfg = OptimizeConfig {
            params,
            oracle,
            seed: self.seed,
            force_edges: self.force_edge.clone(),
            enumerate_limit: self.enumerate_limit,
        };
        Ok((g, cfg))
    }

    fn optimize(&self) -> Result<(CompGraph, OptimizeConfig, Optimized)> {
        let (g, cfg) = self.load()?;
        let opt = pipeline::optimize(&g, &cfg)?;
        info!(
            "{} of {} VTOG edges selected, {} operators eliminated",
            opt.report.selected.len(),
            opt.report.vtog_edges,
            opt.report.eliminated_count
        );
        Ok((g, cfg, opt))
    }
}

fn print_verify(r: &pipeline::VerifyReport) {
    println!("verify: PASS (seed {})", r.seed);
    for o in &r.outputs {
        println!("  {:<16} sha256:{}", o.tensor, o.sha256);
    }
}

fn write_dots(dir: &Path, opt: &Optimized) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("vtog.dot"), opt.vtog.to_dot())?;
    fs::write(dir.join("ptg.dot"), opt.ptg().to_dot(&opt.vtog))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Optimize { run, out, verify, emit_dot } => {
            let (g, cfg, opt) = run.optimize()?;
            pipeline::write_artifacts(&out, &opt, emit_dot)?;
            let r = &opt.report;
            println!(
                "eliminated {} operator(s): {}",
                r.eliminated_count,
                if r.eliminated_ops.is_empty() { "-".to_string() } else { r.eliminated_ops.join(", ") }
            );
            println!("virtual tensors: {}", if r.virtual_tensors.is_empty() { "-".into() } else { r.virtual_tensors.join(", ") });
            println!("modeled saving: {:.1} ({:.1} -> {:.1})", r.final_saving, r.baseline.total_time, r.optimized.total_time);
            println!("artifacts written to {}", out.display());
            if verify {
                let rep = pipeline::verify(&g, opt.ptg(), cfg.seed)?;
                print_verify(&rep);
            }
        }
        Cmd::Verify { run, corrupt_map } => {
            let (g, cfg, opt) = run.optimize()?;
            let ptg = if corrupt_map { pipeline::corrupt_strategy(&g, opt.ptg())? } else { opt.ptg().clone() };
            let rep = pipeline::verify(&g, &ptg, cfg.seed)?;
            print_verify(&rep);
        }
        Cmd::Breakdown { run } => {
            let (_, _, opt) = run.optimize()?;
            print!("{}", pipeline::render_breakdown(&opt.report.breakdown_before, &opt.report.breakdown_after));
        }
        Cmd::Dot { run, out } => {
            let (_, _, opt) = run.optimize()?;
            match out {
                Some(dir) => {
                    write_dots(&dir, &opt)?;
                    println!("wrote {}", dir.display());
                }
                None => print!("{}", opt.vtog.to_dot()),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VTELIM_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

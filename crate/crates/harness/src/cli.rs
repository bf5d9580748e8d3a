//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::{parse_seeds, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::experiments::{
    ablate_prepared, align_stage, compare_prepared, dump_sim, eval_stage, gen_stage, prepare, prepare_all,
    student_stage, summary_csv, teacher_stage, Method,
};
use crate::workers::{parallel_map, worker_count};

#[derive(Debug, Parser)]
#[command(
    name = "otdistill",
    version,
    about = "Multi-teacher optimal-transport distillation experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output root.
    #[arg(long)]
    pub outdir: PathBuf,
    /// Comma-separated seeds, overriding the config's list.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Only print warnings and errors.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate and export the dataset.
    Gen(Common),
    /// Train the multimodal teacher and its T-Net.
    TrainTeacher(Common),
    /// Align teacher backbones with the joint representation.
    Align(Common),
    /// Train a student with the configured selector from the aligned pool.
    TrainStudent(Common),
    /// Test metric of a saved student.
    Eval(Common),
    /// Full method ladder; writes summary.csv and runs.csv.
    Compare(Common),
    /// Batch-size by anchor grid and centroid on/off for MT-PKDOT.
    Ablate(Common),
    /// Per-epoch student similarity matrices on a fixed probe batch.
    DumpSim(Common),
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Gen(c)
            | Command::TrainTeacher(c)
            | Command::Align(c)
            | Command::TrainStudent(c)
            | Command::Eval(c)
            | Command::Compare(c)
            | Command::Ablate(c)
            | Command::DumpSim(c) => c,
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, Vec<u64>)> {
    let mut exp = ExperimentConfig::load(&common.config)?;
    if let Some(s) = &common.seeds {
        exp.seeds = parse_seeds(s)?;
        exp.validate()?;
    }
    let seeds = exp.seeds.clone();
    Ok((exp, seeds))
}

/// Runs one parsed command. Progress goes to the log; results are printed.
pub fn run(cli: &Cli) -> Result<()> {
    let common = cli.command.common();
    let (exp, seeds) = load(common)?;
    let out = common.outdir.as_path();
    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let workers = worker_count();
    match &cli.command {
        Command::Gen(_) => {
            for dir in parallel_map(&seeds, workers, |&s| gen_stage(&exp, s, out))? {
                println!("wrote {}", dir.display());
            }
        }
        Command::TrainTeacher(_) => {
            let reports = parallel_map(&seeds, workers, |&s| teacher_stage(&exp, s, out))?;
            for (s, r) in seeds.iter().zip(reports) {
                println!(
                    "seed {s}: teacher test {:.6} (best epoch {})",
                    r.test.value(),
                    r.best_epoch
                );
            }
        }
        Command::Align(_) => {
            let reports = parallel_map(&seeds, workers, |&s| align_stage(&exp, s, out))?;
            for (s, r) in seeds.iter().zip(reports) {
                println!("seed {s}: cosine to joint {:?} -> {:?}", r.pre_cosine, r.post_cosine);
            }
        }
        Command::TrainStudent(_) => {
            let records = parallel_map(&seeds, workers, |&s| student_stage(&exp, s, out))?;
            for (s, r) in seeds.iter().zip(records) {
                println!("seed {s}: {} test {:.6}", r.selector.name(), r.test.value());
            }
        }
        Command::Eval(_) => {
            let results = parallel_map(&seeds, workers, |&s| eval_stage(&exp, s, out))?;
            for (s, (now, stored)) in seeds.iter().zip(results) {
                println!("seed {s}: test {} (run.json {})", now.value(), stored.value());
            }
        }
        Command::Compare(_) => {
            let prepared = prepare_all(&exp, &seeds, workers)?;
            let outcome = compare_prepared(&prepared, &Method::ALL, Some(out), workers)?;
            print!("{}", summary_csv(&outcome.summary));
        }
        Command::Ablate(_) => {
            let prepared = prepare_all(&exp, &seeds, workers)?;
            let outcome = ablate_prepared(&prepared, Some(out), workers)?;
            info!(
                "{} grid cells, {} centroid cells",
                outcome.grid.len(),
                outcome.centroid.len()
            );
            print!(
                "{}",
                std::fs::read_to_string(out.join("ablate_grid.csv")).unwrap_or_default()
            );
            print!(
                "{}",
                std::fs::read_to_string(out.join("ablate_centroid.csv")).unwrap_or_default()
            );
        }
        Command::DumpSim(_) => {
            let counts = parallel_map(&seeds, workers, |&s| dump_sim(&prepare(&exp, s)?, out))?;
            for (s, n) in seeds.iter().zip(counts) {
                println!("seed {s}: wrote {n} similarity matrices");
            }
        }
    }
    Ok(())
}

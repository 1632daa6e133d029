use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use langground::control::DynamicsSource;
use langground::detector::dataset_views;
use langground::generator::DEFAULT_BUDGET;
use langground::harness::{self, CameraPose, DatasetSpec, EvalOptions, TrainOptions};
use langground::trainer::TrainConfig;
use langground::{Error, Result};

/// Exit status for utterances that admit no layout within the sampling budget.
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "langground", version, about = "Spatial-language grounding experiments on 3D voxel feature grids")]
struct Cli {
    /// Root seed; every command is reproducible from it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, default_value = "models")]
    models_dir: PathBuf,
    /// Worker threads (0 uses every core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct DatasetArgs {
    #[arg(long, default_value_t = 800)]
    train_scenes: usize,
    #[arg(long, default_value_t = 400)]
    test_scenes: usize,
    /// Cameras rendered per scene, spread evenly over the 48 dataset views.
    #[arg(long, default_value_t = 48)]
    cameras: usize,
    #[arg(long, default_value_t = 2)]
    max_objects: usize,
}

impl DatasetArgs {
    fn spec(&self, seed: u64) -> Result<DatasetSpec> {
        let views = dataset_views();
        if self.cameras == 0 || self.cameras > views.len() {
            return Err(Error::Invalid(format!("--cameras must be in 1..={}", views.len())));
        }
        let stride = views.len() / self.cameras;
        Ok(DatasetSpec {
            n_train: self.train_scenes,
            n_test: self.test_scenes,
            cameras: views
                .into_iter()
                .step_by(stride)
                .take(self.cameras)
                .map(|(a, e)| CameraPose::new(a, e))
                .collect(),
            max_objects: self.max_objects,
            seed,
        })
    }
}

#[derive(clap::Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::unary_default().epochs)]
    unary_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::pairwise_default().epochs)]
    pairwise_epochs: usize,
}

impl TrainArgs {
    fn options(&self, seed: u64) -> TrainOptions {
        TrainOptions {
            unary: TrainConfig {
                epochs: self.unary_epochs,
                ..TrainConfig::unary_default()
            },
            pairwise: TrainConfig {
                epochs: self.pairwise_epochs,
                ..TrainConfig::pairwise_default()
            },
            seed,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Dynamics {
    Known,
    Fitted,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize and render a dataset into <out-dir>/dataset.
    Synth(DatasetArgs),
    /// Train the detector models on a dataset and write them to <models-dir>.
    Train {
        /// Defaults to <out-dir>/dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Sample and render layouts for an utterance.
    Generate {
        utterance: String,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        azimuth: f64,
        #[arg(long, default_value_t = 40.0)]
        elevation: f64,
    },
    /// Classify utterances as affordable or not.
    Afford {
        /// Lines of `label<TAB>utterance`; without it the seeded contradiction set is used.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 92)]
        items: usize,
    },
    /// Referential detection on the test split, in-domain and out-of-domain views.
    Detect {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Execute placement instructions for every relation of the table.
    Follow {
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, value_enum, default_value_t = Dynamics::Known)]
        dynamics: Dynamics,
        /// Random rollouts for the fitted model.
        #[arg(long, default_value_t = 24)]
        rollouts: usize,
    },
    /// Synthesize, train and run every suite; writes <out-dir>/metrics.json.
    EvalAll {
        #[command(flatten)]
        dataset: DatasetArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 92)]
        items: usize,
        #[arg(long, default_value_t = 500)]
        proposal_scenes: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 24)]
        rollouts: usize,
    },
}

fn print<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let Cli {
        seed,
        out_dir,
        models_dir,
        jobs,
        command,
    } = cli;
    let default_dataset = out_dir.join("dataset");
    harness::with_jobs(jobs, move || match command {
        Command::Synth(args) => {
            let m = harness::cmd_synth(&args.spec(seed)?, &default_dataset)?;
            println!("{} scenes, {} cameras each, in {}", m.scenes.len(), m.cameras.len(), default_dataset.display());
            Ok(())
        }
        Command::Train { dataset, train } => {
            let (_, summary) = harness::cmd_train(dataset.unwrap_or(default_dataset), &models_dir, &train.options(seed))?;
            print(&summary)
        }
        Command::Generate {
            utterance,
            samples,
            azimuth,
            elevation,
        } => {
            let r = harness::cmd_generate(&utterance, &models_dir, samples, CameraPose::new(azimuth, elevation), seed, out_dir.join("generate"))?;
            print(&r)
        }
        Command::Afford { input, items } => {
            let set = match input {
                Some(p) => harness::read_afford_items(p)?,
                None => harness::contradiction_items(items, seed),
            };
            print(&harness::cmd_afford(&set, &models_dir, seed, out_dir.join("afford"))?)
        }
        Command::Detect { dataset } => print(&harness::cmd_detect(
            dataset.unwrap_or(default_dataset),
            &models_dir,
            seed,
            out_dir.join("detect"),
        )?),
        Command::Follow { trials, dynamics, rollouts } => {
            let d = match dynamics {
                Dynamics::Known => DynamicsSource::Known,
                Dynamics::Fitted => DynamicsSource::Fitted { rollouts },
            };
            print(&harness::cmd_follow(&models_dir, seed, trials, d, out_dir.join("follow"))?)
        }
        Command::EvalAll {
            dataset,
            train,
            items,
            proposal_scenes,
            trials,
            rollouts,
        } => {
            let opts = EvalOptions {
                dataset: dataset.spec(seed)?,
                train: train.options(seed),
                afford_items: items,
                proposal_scenes,
                follow_trials: trials,
                fitted_rollouts: rollouts,
            };
            print(&harness::cmd_eval_all(&opts, &models_dir, &out_dir)?)
        }
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Infeasible { .. }) => {
            eprintln!("error: {e}: no layout within the sampling budget of {DEFAULT_BUDGET} restarts");
            ExitCode::from(EXIT_INFEASIBLE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

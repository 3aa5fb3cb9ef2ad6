use std::path::PathBuf;

use clap::Args;
use ncamorph::engine::init_model;
use ncamorph::optim::{load_checkpoint, loss_csv, save_checkpoint, train, LossRecord, TrainState};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::files::{guard, load_dataset, load_train_pairs, with_suffix, write_text};

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Pair manifest (tab-separated: fixed, fixed_seg, moving, moving_seg).
    #[arg(long)]
    pub data: PathBuf,
    /// key=value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set iterations=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Final checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log; defaults to the checkpoint path with `.loss.csv` appended.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub records: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn default_loss_csv(out: &std::path::Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary> {
    let config = RunConfig::resolve(args.config.as_deref(), &args.sets)?;
    config.log("train");
    let loss_path = args.loss_csv.clone().unwrap_or_else(|| default_loss_csv(&args.out));
    guard(&args.out, args.force)?;
    guard(&loss_path, args.force)?;

    let state = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let Some(adam) = ckpt.adam else {
                return Err(CliError::Usage(format!(
                    "{} has no optimizer state to resume from",
                    path.display()
                )));
            };
            if config.arch_given() && config.arch != ckpt.model.config {
                return Err(CliError::Usage(
                    "architecture keys disagree with the checkpoint being resumed".into(),
                ));
            }
            log::info!("train: resuming {} at iteration {}", path.display(), adam.t);
            TrainState {
                model: ckpt.model,
                adam,
            }
        }
        None => TrainState::new(init_model(config.train.seed, &config.arch)?),
    };

    let data = load_dataset(&args.data)?;
    let pairs = load_train_pairs(&data)?;
    log::info!("train: {} pairs, {} parameters", pairs.len(), state.model.param_count());

    let every = config.train.checkpoint_every;
    let total = config.train.iterations;
    let periodic = |done: usize| with_suffix(&args.out, &format!("it{done:06}"));
    if every > 0 {
        for done in (state.iteration() + 1..total).filter(|d| d % every == 0) {
            guard(&periodic(done), args.force)?;
        }
    }
    let mut written = Vec::new();
    let (state, records) = train(&pairs, state, &config.train, |record, state| {
        let done = state.iteration();
        if record.iteration % 10 == 0 {
            log::info!("train: iteration {} loss {:.6}", record.iteration, record.total);
        }
        if every > 0 && done % every == 0 && done < total {
            let path = periodic(done);
            save_checkpoint(&state.model, Some(&state.adam), &path)?;
            written.push(path);
        }
        Ok(())
    })?;
    let bytes = save_checkpoint(&state.model, Some(&state.adam), &args.out)?;
    write_text(&loss_path, &loss_csv(&records), true)?;
    log::info!("train: wrote {} ({bytes} bytes) after {} iterations", args.out.display(), state.iteration());
    Ok(TrainSummary {
        checkpoint: args.out.clone(),
        loss_csv: loss_path,
        records,
        checkpoints: written,
    })
}

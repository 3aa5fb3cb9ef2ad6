use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use ncamorph::engine::init_model;
use ncamorph::optim::{save_checkpoint, train, TrainState};

use super::eval::evaluate_dataset;
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::files::{create_dir, guard, load_dataset, load_train_pairs, write_text};

#[derive(Args, Clone, Debug)]
pub struct AblateArgs {
    /// Training manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation manifest (defaults to --data).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// One cell per line as space-separated key=value overrides; defaults
    /// to the built-in kernel, step and width sweep.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    /// Base config shared by every cell.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

/// Kernel sizes at 10 steps, step counts at kernel 3, and widths at kernel 3
/// with 5 steps.
pub const DEFAULT_GRID: &str = "\
# kernel size
kernel=3 steps=10 channels=16 hidden=64
kernel=5 steps=10 channels=16 hidden=64
kernel=7 steps=10 channels=16 hidden=64
kernel=9 steps=10 channels=16 hidden=64
# steps
kernel=3 steps=5 channels=16 hidden=64
kernel=3 steps=10 channels=16 hidden=64
kernel=3 steps=30 channels=16 hidden=64
kernel=3 steps=50 channels=16 hidden=64
# channels and hidden width
kernel=3 steps=5 channels=16 hidden=64
kernel=3 steps=5 channels=16 hidden=128
kernel=3 steps=5 channels=32 hidden=64
kernel=3 steps=5 channels=32 hidden=128
";

pub fn parse_grid(text: &str) -> Result<Vec<Vec<String>>> {
    let cells: Vec<Vec<String>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split_whitespace().map(String::from).collect())
        .collect();
    if cells.is_empty() {
        return Err(CliError::Usage("ablation grid has no cells".into()));
    }
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: usize,
    pub overrides: String,
    pub params: usize,
    pub final_loss: f64,
    pub dice_baseline: Option<f64>,
    pub dice_mean: Option<f64>,
    pub ssim: f64,
    pub neg_jac: f64,
}

pub const ABLATION_CSV_HEADER: &str =
    "cell,channels,hidden,kernel,steps,params,final_loss,dice_baseline,dice_mean,ssim,neg_jac";

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let grid_text = match &args.grid {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => DEFAULT_GRID.to_string(),
    };
    let cells = parse_grid(&grid_text)?;
    let csv_path = args.out.join("ablation.csv");
    create_dir(&args.out)?;
    guard(&csv_path, args.force)?;
    let ckpt = |i: usize| args.out.join(format!("cell_{i:02}.ncam"));
    for i in 0..cells.len() {
        guard(&ckpt(i), args.force)?;
    }
    // Resolve every cell up front so a typo fails before any training.
    let configs: Vec<RunConfig> = cells
        .iter()
        .map(|cell| {
            let sets: Vec<String> = args.sets.iter().chain(cell).cloned().collect();
            RunConfig::resolve(args.config.as_deref(), &sets)
        })
        .collect::<Result<_>>()?;

    let train_pairs = load_train_pairs(&load_dataset(&args.data)?)?;
    let eval_data = load_dataset(args.eval_data.as_ref().unwrap_or(&args.data))?;
    let mut rows = Vec::new();
    let mut csv = format!("{ABLATION_CSV_HEADER}\n");
    for (i, (cell, config)) in cells.iter().zip(&configs).enumerate() {
        config.log(&format!("ablate cell {i}"));
        let state = TrainState::new(init_model(config.train.seed, &config.arch)?);
        let (state, records) = train(&train_pairs, state, &config.train, |_, _| Ok(()))?;
        save_checkpoint(&state.model, None, ckpt(i))?;
        let eval = evaluate_dataset(&state.model, &eval_data, &[], config.train.seed, false)?;
        let (base, model) = (&eval.means[0], &eval.means[1]);
        let row = AblationRow {
            cell: i,
            overrides: cell.join(" "),
            params: state.model.param_count(),
            final_loss: records.last().map_or(f64::NAN, |r| r.total),
            dice_baseline: base.dice_mean,
            dice_mean: model.dice_mean,
            ssim: model.ssim,
            neg_jac: model.neg_jac,
        };
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6}"));
        let a = &config.arch;
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{},{:.6},{},{},{:.6},{:.2}",
            a.channels,
            a.hidden,
            a.kernel,
            a.steps,
            row.params,
            row.final_loss,
            opt(row.dice_baseline),
            opt(row.dice_mean),
            row.ssim,
            row.neg_jac
        );
        log::info!("ablate: cell {i} [{}] dice {}", row.overrides, opt(row.dice_mean));
        rows.push(row);
    }
    write_text(&csv_path, &csv, true)?;
    Ok(rows)
}

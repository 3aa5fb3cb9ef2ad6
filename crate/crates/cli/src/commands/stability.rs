use std::path::PathBuf;

use clap::Args;
use ncamorph::engine::{stability_probe, StabilitySummary};
use ncamorph::optim::load_checkpoint;
use ncamorph::volio::{read_labels, write_flow, write_nifti, Volume};
use ncamorph::warpfield::FlowField;
use ncamorph::Grid;

use super::register::model_with_rate;
use crate::error::{CliError, Result};
use crate::files::{create_dir, guard, load_image, padded_shape, write_text};

#[derive(Args, Clone, Debug)]
pub struct StabilityArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub moving_seg: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub runs: usize,
    /// Run `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the checkpoint's fire rate.
    #[arg(long)]
    pub fire_rate: Option<f64>,
    /// Directory for flow_std.nii, seg_std.nii and summary.txt.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn summary_text(s: &StabilitySummary, fire_rate: f64) -> String {
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v:.6e}"));
    format!(
        "runs={}\nfire_rate={fire_rate}\nmean_flow_std={:.6e}\nmax_flow_std={:.6e}\nmean_seg_std={}\nmax_seg_std={}\n",
        s.runs,
        s.mean_flow_std,
        s.max_flow_std,
        opt(s.mean_seg_std),
        opt(s.max_seg_std)
    )
}

#[derive(Debug)]
pub struct StabilityOutput {
    pub summary: StabilitySummary,
    pub flow_std: Grid<f32>,
}

pub fn cmd_stability(args: &StabilityArgs) -> Result<StabilityOutput> {
    if args.runs < 2 {
        return Err(CliError::Usage("--runs must be at least 2".into()));
    }
    let model = model_with_rate(&load_checkpoint(&args.ckpt)?.model, args.fire_rate)?;
    let fixed = load_image(&args.fixed)?;
    let moving = load_image(&args.moving)?;
    let seg = args.moving_seg.as_ref().map(read_labels).transpose()?.map(|s| s.0);
    let shape = fixed.shape();
    if padded_shape(shape, &model.config) != shape {
        return Err(CliError::Usage(format!(
            "stability needs sides divisible by {}, got {shape:?}",
            model.config.size_multiple()
        )));
    }
    let (flow_path, seg_path, summary_path) =
        (args.out.join("flow_std.nii"), args.out.join("seg_std.nii"), args.out.join("summary.txt"));
    create_dir(&args.out)?;
    for p in [&flow_path, &seg_path, &summary_path] {
        guard(p, args.force)?;
    }
    let seeds: Vec<u64> = (0..args.runs as u64).map(|i| args.seed + i).collect();
    let report = stability_probe(&fixed.grid, &moving.grid, seg.as_ref(), &model, &seeds)?;
    write_flow(&FlowField::new(report.flow_std.clone())?, &fixed.geometry, &flow_path)?;
    if let Some(seg_std) = &report.seg_std {
        // Largest spread over the label channels.
        let max = Grid::from_fn(1, shape, |_, z, y, x| {
            (0..seg_std.channels()).fold(0.0f32, |m, c| m.max(seg_std.get(c, z, y, x)))
        });
        write_nifti(
            &Volume {
                grid: max,
                geometry: fixed.geometry.clone(),
            },
            &seg_path,
        )?;
    }
    write_text(&summary_path, &summary_text(&report.summary, model.config.fire_rate), true)?;
    log::info!(
        "stability: {} runs, mean flow std {:.4e}, max {:.4e}",
        report.summary.runs,
        report.summary.mean_flow_std,
        report.summary.max_flow_std
    );
    Ok(StabilityOutput {
        summary: report.summary,
        flow_std: report.flow_std,
    })
}

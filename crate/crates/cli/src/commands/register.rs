use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use ncamorph::engine::{register_pair, NcaModel};
use ncamorph::optim::load_checkpoint;
use ncamorph::volio::{normalize, read_labels, read_nifti, write_flow, write_labels, write_nifti, Volume};
use ncamorph::warpfield::{warp_nearest, warp_trilinear, FlowField};
use ncamorph::Grid;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::files::{crop_flow, guard, pad, padded_shape, with_suffix};

#[derive(Args, Clone, Debug)]
pub struct RegisterArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Segmentation of the moving image, warped with nearest-neighbour lookup.
    #[arg(long)]
    pub moving_seg: Option<PathBuf>,
    #[arg(long)]
    pub out_flow: PathBuf,
    #[arg(long)]
    pub out_warped: PathBuf,
    #[arg(long, requires = "moving_seg")]
    pub out_warped_seg: Option<PathBuf>,
    /// One rate, or a comma-separated sweep; with several rates every output
    /// name gets a `.frR` suffix.
    #[arg(long, value_delimiter = ',')]
    pub fire_rate: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub force: bool,
}

/// Full-resolution registration of arbitrary-shaped inputs: zero-pads both
/// images up to the pyramid's size multiple and crops the flow back.
pub fn register_any(
    model: &NcaModel<f32>,
    fixed: &Grid<f32>,
    moving: &Grid<f32>,
    seed: u64,
) -> Result<FlowField> {
    let shape = fixed.shape();
    let padded = padded_shape(shape, &model.config);
    if padded != shape {
        log::info!("note: input {shape:?} zero-padded to {padded:?}; the flow is cropped back");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (flow, _) = register_pair(&pad(fixed, padded), &pad(moving, padded), model, &mut rng, None)?;
    crop_flow(flow, shape)
}

pub fn model_with_rate(model: &NcaModel<f32>, rate: Option<f64>) -> Result<NcaModel<f32>> {
    Ok(match rate {
        Some(r) => model.with_fire_rate(r)?,
        None => model.clone(),
    })
}

pub fn cmd_register(args: &RegisterArgs) -> Result<Vec<PathBuf>> {
    let model = load_checkpoint(&args.ckpt)?.model;
    // The network sees normalized intensities; the warped output keeps the
    // moving image's own units.
    let fixed = read_nifti(&args.fixed)?;
    let moving = read_nifti(&args.moving)?;
    if fixed.shape() != moving.shape() {
        return Err(ncamorph::Error::ShapeMismatch {
            left: fixed.shape(),
            right: moving.shape(),
        }
        .into());
    }
    let (norm_fixed, norm_moving) = (normalize(&fixed)?, normalize(&moving)?);
    let seg = args.moving_seg.as_ref().map(read_labels).transpose()?;
    let rates: Vec<Option<f64>> = if args.fire_rate.is_empty() {
        vec![None]
    } else {
        args.fire_rate.iter().map(|&r| Some(r)).collect()
    };
    let sweep = rates.len() > 1;
    let name = |base: &PathBuf, rate: Option<f64>| match rate {
        Some(r) if sweep => with_suffix(base, &format!("fr{r}")),
        _ => base.clone(),
    };
    for &rate in &rates {
        guard(&name(&args.out_flow, rate), args.force)?;
        guard(&name(&args.out_warped, rate), args.force)?;
        if let Some(p) = &args.out_warped_seg {
            guard(&name(p, rate), args.force)?;
        }
    }
    if args.out_warped_seg.is_some() && seg.is_none() {
        return Err(CliError::Usage("--out-warped-seg needs --moving-seg".into()));
    }

    let mut written = Vec::new();
    for rate in rates {
        let model = model_with_rate(&model, rate)?;
        let started = Instant::now();
        let flow = register_any(&model, &norm_fixed.grid, &norm_moving.grid, args.seed)?;
        log::info!(
            "register: fire rate {} in {:.3}s, max |u| {:.3}",
            model.config.fire_rate,
            started.elapsed().as_secs_f64(),
            flow.max_abs()
        );
        let warped = Volume {
            grid: warp_trilinear(&moving.grid, &flow)?,
            geometry: fixed.geometry.clone(),
        };
        let flow_path = name(&args.out_flow, rate);
        write_flow(&flow, &fixed.geometry, &flow_path)?;
        let warped_path = name(&args.out_warped, rate);
        write_nifti(&warped, &warped_path)?;
        written.extend([flow_path, warped_path]);
        if let (Some(base), Some((labels, _))) = (&args.out_warped_seg, &seg) {
            let path = name(base, rate);
            write_labels(&warp_nearest(labels, &flow)?, &fixed.geometry, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

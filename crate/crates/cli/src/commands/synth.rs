use std::path::{Path, PathBuf};

use clap::Args;
use ncamorph::volio::{synth_pair, write_flow, write_labels, write_nifti, PairDataset, PairEntry, SynthConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::files::{create_dir, guard};

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub pairs: usize,
    /// Volume shape as D,H,W (or one number for a cube).
    #[arg(long, default_value = "48,48,48", value_parser = parse_shape)]
    pub size: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write train.tsv (all but the last N pairs) and test.tsv (the last N).
    #[arg(long, default_value_t = 0)]
    pub holdout: usize,
    #[arg(long, default_value_t = 4)]
    pub blobs: usize,
    #[arg(long, default_value_t = 4)]
    pub labels: u32,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Largest displacement in voxels.
    #[arg(long, default_value_t = 10.0)]
    pub amplitude: f64,
    /// Control-point spacing of the displacement in voxels.
    #[arg(long, default_value_t = 32.0)]
    pub smoothness: f64,
    #[arg(long)]
    pub force: bool,
}

pub fn parse_shape(text: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{text:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [s] => Ok([s; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(format!("{text:?}: expected D,H,W")),
    }
}

/// Paths written for one pair.
pub fn pair_paths(dir: &Path, index: usize) -> [PathBuf; 5] {
    ["fixed", "fixed_seg", "moving", "moving_seg", "flow"].map(|k| dir.join(format!("pair_{index:03}_{k}.nii")))
}

#[derive(Debug)]
pub struct SynthSummary {
    pub manifest: PathBuf,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<SynthSummary> {
    if args.pairs == 0 {
        return Err(CliError::Usage("--pairs must be at least 1".into()));
    }
    if args.holdout >= args.pairs {
        return Err(CliError::Usage(format!(
            "--holdout {} leaves no training pairs out of {}",
            args.holdout, args.pairs
        )));
    }
    let config = SynthConfig {
        shape: args.size,
        blobs: args.blobs,
        labels: args.labels,
        noise: args.noise,
        amplitude: args.amplitude,
        smoothness: args.smoothness,
        seed: args.seed,
    };
    config.validate()?;
    create_dir(&args.out)?;
    let manifest = args.out.join("manifest.tsv");
    let (train, test) = (args.out.join("train.tsv"), args.out.join("test.tsv"));
    guard(&manifest, args.force)?;
    if args.holdout > 0 {
        guard(&train, args.force)?;
        guard(&test, args.force)?;
    }
    for i in 0..args.pairs {
        for p in pair_paths(&args.out, i) {
            guard(&p, args.force)?;
        }
    }

    let mut entries = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        rng.set_stream(i as u64);
        let pair = synth_pair(&config, &mut rng)?;
        let [fixed, fixed_seg, moving, moving_seg, flow] = pair_paths(&args.out, i);
        write_nifti(&pair.fixed, &fixed)?;
        write_labels(&pair.fixed_seg, &pair.fixed.geometry, &fixed_seg)?;
        write_nifti(&pair.moving, &moving)?;
        write_labels(&pair.moving_seg, &pair.moving.geometry, &moving_seg)?;
        write_flow(&pair.flow, &pair.fixed.geometry, &flow)?;
        entries.push(PairEntry {
            fixed,
            fixed_seg: Some(fixed_seg),
            moving,
            moving_seg: Some(moving_seg),
        });
        log::debug!("synth: pair {i} written");
    }
    let split = args.pairs - args.holdout;
    PairDataset { entries: entries.clone() }.write_manifest(&manifest)?;
    let (train, test) = if args.holdout > 0 {
        PairDataset { entries: entries[..split].to_vec() }.write_manifest(&train)?;
        PairDataset { entries: entries[split..].to_vec() }.write_manifest(&test)?;
        (Some(train), Some(test))
    } else {
        (None, None)
    };
    log::info!("synth: {} pairs of {:?} in {}", args.pairs, args.size, args.out.display());
    Ok(SynthSummary { manifest, train, test })
}

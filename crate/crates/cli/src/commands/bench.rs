use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use ncamorph::engine::{init_model, ArchConfig, NcaModel};
use ncamorph::optim::load_checkpoint;
use ncamorph::Grid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::register::register_any;
use crate::error::{CliError, Result};
use crate::files::{padded_shape, write_text};

#[derive(Args, Clone, Debug)]
pub struct BenchArgs {
    /// Checkpoint to time; a freshly initialised default model otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Cube side lengths.
    #[arg(long, value_delimiter = ',', default_value = "32,64,96,128")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV: size,mean_seconds,std_seconds,peak_rss_if_available.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub median_seconds: f64,
    /// Peak resident set so far, in KiB (Linux `VmHWM`).
    pub peak_rss_kib: Option<u64>,
    pub padded_to: Option<usize>,
}

#[derive(Debug)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    /// Medians never decrease as the size grows.
    pub monotone: bool,
}

pub const BENCH_CSV_HEADER: &str = "size,mean_seconds,std_seconds,peak_rss_if_available";

fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        let rss = r.peak_rss_kib.map_or(String::new(), |k| k.to_string());
        let _ = writeln!(s, "{},{:.6},{:.6},{rss}", r.size, r.mean_seconds, r.std_seconds);
    }
    s
}

pub fn run_bench(model: &NcaModel<f32>, sizes: &[usize], repeats: usize, seed: u64) -> Result<BenchSummary> {
    let mut rows = Vec::new();
    for &size in sizes {
        let shape = [size; 3];
        let padded = padded_shape(shape, &model.config)[0];
        if padded != size {
            log::warn!("bench: size {size} is not a multiple of {}; timing includes padding to {padded}", model.config.size_multiple());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ size as u64);
        let fixed = Grid::from_fn(1, shape, |_, _, _, _| rng.random::<f32>());
        let moving = Grid::from_fn(1, shape, |_, _, _, _| rng.random::<f32>());
        let times: Vec<f64> = (0..repeats)
            .map(|r| {
                let started = Instant::now();
                register_any(model, &fixed, &moving, seed + r as u64)?;
                Ok(started.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / repeats as f64;
        let row = BenchRow {
            size,
            mean_seconds: mean,
            std_seconds: var.sqrt(),
            median_seconds: median(&times),
            peak_rss_kib: peak_rss_kib(),
            padded_to: (padded != size).then_some(padded),
        };
        log::info!("bench: {size}^3 mean {:.3}s median {:.3}s", row.mean_seconds, row.median_seconds);
        rows.push(row);
    }
    let mut order: Vec<&BenchRow> = rows.iter().collect();
    order.sort_by_key(|r| r.size);
    let monotone = order.windows(2).all(|w| w[1].median_seconds >= w[0].median_seconds);
    if !monotone {
        log::warn!("bench: median time is not monotone in size (timing noise?)");
    }
    Ok(BenchSummary { rows, monotone })
}

pub fn cmd_bench(args: &BenchArgs) -> Result<BenchSummary> {
    if args.sizes.is_empty() || args.sizes.contains(&0) || args.repeats == 0 {
        return Err(CliError::Usage("need positive --sizes and --repeats".into()));
    }
    crate::files::guard(&args.out, args.force)?;
    let model = match &args.ckpt {
        Some(p) => load_checkpoint(p)?.model,
        None => init_model(args.seed, &ArchConfig::default())?,
    };
    let summary = run_bench(&model, &args.sizes, args.repeats, args.seed)?;
    write_text(&args.out, &bench_csv(&summary.rows), true)?;
    Ok(summary)
}

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use ncamorph::engine::NcaModel;
use ncamorph::metrics::{baseline, evaluate_pair, MetricsReport};
use ncamorph::optim::load_checkpoint;
use ncamorph::volio::{normalize, PairDataset};

use super::register::{model_with_rate, register_any};
use crate::error::Result;
use crate::files::{load_dataset, write_text};

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics CSV: pair_id,dice_mean,ssim,neg_jac,seconds.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate each of these fire rates instead of the checkpoint's own.
    #[arg(long, value_delimiter = ',')]
    pub fire_rates: Vec<f64>,
    /// Pair `i` is registered with seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave the seconds column as nan so repeated runs give identical files.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub force: bool,
}

/// Mean Dice (over pairs with segmentations) and SSIM of one row group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMean {
    pub label: String,
    pub dice_mean: Option<f64>,
    pub ssim: f64,
    pub neg_jac: f64,
}

#[derive(Debug)]
pub struct EvalSummary {
    pub rows: Vec<(String, MetricsReport)>,
    /// Baseline first, then one entry per evaluated fire rate.
    pub means: Vec<GroupMean>,
}

impl EvalSummary {
    pub fn mean(&self, label: &str) -> Option<&GroupMean> {
        self.means.iter().find(|m| m.label == label)
    }
}

fn group_mean(label: String, reports: &[&MetricsReport]) -> GroupMean {
    let n = reports.len().max(1) as f64;
    let dice: Vec<f64> = reports.iter().filter_map(|r| r.dice_mean).collect();
    GroupMean {
        label,
        dice_mean: (!dice.is_empty()).then(|| dice.iter().sum::<f64>() / dice.len() as f64),
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        neg_jac: reports.iter().map(|r| r.neg_jacobian_count as f64).sum::<f64>() / n,
    }
}

/// Scores every pair of `data`: a zero-flow baseline row, then one row per
/// model variant. Row ids are `<pair>:baseline` and `<pair>:<variant>`.
pub fn evaluate_dataset(
    model: &NcaModel<f32>,
    data: &PairDataset,
    fire_rates: &[f64],
    seed: u64,
    timing: bool,
) -> Result<EvalSummary> {
    let variants: Vec<(String, NcaModel<f32>)> = if fire_rates.is_empty() {
        vec![("model".into(), model.clone())]
    } else {
        fire_rates
            .iter()
            .map(|&r| Ok((format!("fr{r}"), model_with_rate(model, Some(r))?)))
            .collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    for i in 0..data.len() {
        let pair = data.load(i)?;
        let id = format!("pair_{i:03}");
        let (fs, ms) = (pair.fixed_seg.as_ref(), pair.moving_seg.as_ref());
        rows.push((format!("{id}:baseline"), baseline(&pair.fixed.grid, fs, &pair.moving.grid, ms)?));
        let (nf, nm) = (normalize(&pair.fixed)?.grid, normalize(&pair.moving)?.grid);
        for (name, variant) in &variants {
            let started = Instant::now();
            let flow = register_any(variant, &nf, &nm, seed + i as u64)?;
            let seconds = started.elapsed().as_secs_f64();
            let mut report = evaluate_pair(&pair.fixed.grid, fs, &pair.moving.grid, ms, &flow)?;
            report.inference_seconds = timing.then_some(seconds);
            report.params = Some(variant.param_count());
            rows.push((format!("{id}:{name}"), report));
        }
    }
    let mut means = Vec::new();
    for name in std::iter::once("baseline".to_string()).chain(variants.iter().map(|v| v.0.clone())) {
        let suffix = format!(":{name}");
        let group: Vec<&MetricsReport> = rows.iter().filter(|r| r.0.ends_with(&suffix)).map(|r| &r.1).collect();
        means.push(group_mean(name, &group));
    }
    Ok(EvalSummary { rows, means })
}

pub fn eval_csv(rows: &[(String, MetricsReport)]) -> String {
    let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
    for (id, r) in rows {
        let _ = writeln!(s, "{}", r.csv_row(id));
    }
    s
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalSummary> {
    crate::files::guard(&args.out, args.force)?;
    let model = load_checkpoint(&args.ckpt)?.model;
    let data = load_dataset(&args.data)?;
    let summary = evaluate_dataset(&model, &data, &args.fire_rates, args.seed, !args.no_timing)?;
    write_text(&args.out, &eval_csv(&summary.rows), true)?;
    for m in &summary.means {
        let dice = m.dice_mean.map_or("nan".to_string(), |d| format!("{d:.4}"));
        log::info!("eval: {:<9} dice {dice} ssim {:.4} neg_jac {:.1}", m.label, m.ssim, m.neg_jac);
    }
    Ok(summary)
}

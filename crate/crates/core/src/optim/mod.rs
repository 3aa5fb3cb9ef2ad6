//! Adam, the patch-based training loop, and checkpoints.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::{flatten, register_pair_backward, register_pair_traced, NcaModel, Patch};
use crate::error::{Error, Result};
use crate::kvtext::KvText;
use crate::objective::{similarity_term, total_loss_region, LossInputs, LossWeights, Similarity};
use crate::volgrid::{avg_downsample, crop_patch, Grid};
use crate::warpfield::{FlowField, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if ![self.beta1, self.beta2].iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::InvalidConfig("betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates; `t` counts completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [f32], grads: &[f32], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            actual: grads.len().min(state.m.len()).min(state.v.len()),
        });
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powf(state.t as f64);
    let c2 = 1.0 - b2.powf(state.t as f64);
    for i in 0..params.len() {
        let g = grads[i] as f64;
        let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
        let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
        state.m[i] = m as f32;
        state.v[i] = v as f32;
        let step = config.learning_rate * (m / c1) / ((v / c2).sqrt() + config.eps);
        params[i] = (params[i] as f64 - step) as f32;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub iterations: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: usize,
    /// Finest-level patch; `None` means full size / downsample factor.
    pub patch_size: Option<[usize; 3]>,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            iterations: 200,
            seed: 0,
            checkpoint_every: 0,
            patch_size: None,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 13] = [
        "learning_rate",
        "beta1",
        "beta2",
        "adam_eps",
        "iterations",
        "seed",
        "checkpoint_every",
        "patch_size",
        "similarity",
        "lambda_smooth",
        "lambda_seg",
        "ncc_window",
        "aux_coarse_weight",
    ];

    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        self.loss.validate()
    }

    pub fn write_kv(&self, kv: &mut KvText) {
        kv.set("learning_rate", self.adam.learning_rate);
        kv.set("beta1", self.adam.beta1);
        kv.set("beta2", self.adam.beta2);
        kv.set("adam_eps", self.adam.eps);
        kv.set("iterations", self.iterations);
        kv.set("seed", self.seed);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set(
            "patch_size",
            self.patch_size
                .map_or_else(|| "auto".to_string(), |p| format!("{},{},{}", p[0], p[1], p[2])),
        );
        kv.set("similarity", self.loss.similarity);
        kv.set("lambda_smooth", self.loss.lambda_smooth);
        kv.set("lambda_seg", self.loss.lambda_seg);
        kv.set("ncc_window", self.loss.ncc_window);
        kv.set("aux_coarse_weight", self.loss.aux_coarse_weight);
    }

    /// Overrides fields present in `kv`. Choosing `similarity` without an
    /// explicit `lambda_smooth` picks that similarity's default weight.
    pub fn update_from_kv(&mut self, kv: &KvText) -> Result<()> {
        if let Some(v) = kv.get("learning_rate")? {
            self.adam.learning_rate = v;
        }
        if let Some(v) = kv.get("beta1")? {
            self.adam.beta1 = v;
        }
        if let Some(v) = kv.get("beta2")? {
            self.adam.beta2 = v;
        }
        if let Some(v) = kv.get("adam_eps")? {
            self.adam.eps = v;
        }
        if let Some(v) = kv.get("iterations")? {
            self.iterations = v;
        }
        if let Some(v) = kv.get("seed")? {
            self.seed = v;
        }
        if let Some(v) = kv.get("checkpoint_every")? {
            self.checkpoint_every = v;
        }
        if let Some(v) = kv.get_str("patch_size") {
            self.patch_size = parse_patch(v)?;
        }
        if let Some(v) = kv.get::<Similarity>("similarity")? {
            self.loss.similarity = v;
            self.loss.lambda_smooth = match v {
                Similarity::Mse => LossWeights::default().lambda_smooth,
                Similarity::Ncc => LossWeights::ncc().lambda_smooth,
            };
        }
        if let Some(v) = kv.get("lambda_smooth")? {
            self.loss.lambda_smooth = v;
        }
        if let Some(v) = kv.get("lambda_seg")? {
            self.loss.lambda_seg = v;
        }
        if let Some(v) = kv.get("ncc_window")? {
            self.loss.ncc_window = v;
        }
        if let Some(v) = kv.get("aux_coarse_weight")? {
            self.loss.aux_coarse_weight = v;
        }
        Ok(())
    }
}

/// `auto` or `d,h,w` (a single number means a cube).
pub fn parse_patch(text: &str) -> Result<Option<[usize; 3]>> {
    if text == "auto" {
        return Ok(None);
    }
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidConfig(format!("patch_size {text:?}: {e}")))?;
    match parts[..] {
        [s] => Ok(Some([s; 3])),
        [d, h, w] => Ok(Some([d, h, w])),
        _ => Err(Error::InvalidConfig(format!("patch_size {text:?}: expected 1 or 3 values"))),
    }
}

/// An image pair prepared for training (single-channel, same shape).
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub fixed: Grid<f32>,
    pub moving: Grid<f32>,
    /// Both segmentations, sharing one label vocabulary.
    pub segs: Option<(LabelMap, LabelMap)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub sim: f64,
    pub smooth: f64,
    pub seg: Option<f64>,
}

pub const LOSS_CSV_HEADER: &str = "iteration,total,sim,smooth,seg";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        let seg = self.seg.map_or_else(|| "nan".to_string(), |s| format!("{s:.9e}"));
        format!("{},{:.9e},{:.9e},{:.9e},{seg}", self.iteration, self.total, self.sim, self.smooth)
    }
}

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Model plus optimizer; `adam.t` is the number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: NcaModel<f32>,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(model: NcaModel<f32>) -> Self {
        let n = model.param_count();
        Self {
            model,
            adam: AdamState::new(n),
        }
    }

    pub fn iteration(&self) -> usize {
        self.adam.t as usize
    }
}

/// Randomness for one iteration (pair, patch, fire masks). Depends only on
/// the seed and the iteration index, so resumed runs replay exactly.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

fn resolve_patch(shape: [usize; 3], model: &NcaModel<f32>, requested: Option<[usize; 3]>) -> Result<[usize; 3]> {
    let size = requested.unwrap_or_else(|| shape.map(|s| (s / model.config.downsample_factor).max(2)));
    if (0..3).any(|i| size[i] < 2 || size[i] > shape[i]) {
        return Err(Error::InvalidConfig(format!(
            "patch {size:?} must be at least 2 and fit inside {shape:?}"
        )));
    }
    Ok(size)
}

/// One forward/backward pass on `pair` with the given patch; returns the loss
/// and the flat parameter gradient.
pub fn loss_and_grad<R: Rng + ?Sized>(
    pair: &TrainPair,
    model: &NcaModel<f32>,
    weights: &LossWeights,
    patch: Patch,
    rng: &mut R,
) -> Result<(LossRecord, Vec<f32>)> {
    let (flow, diag, trace) = register_pair_traced(&pair.fixed, &pair.moving, model, rng, Some(patch))?;
    let fixed_patch = crop_patch(&pair.fixed, patch.origin, patch.size)?;
    let onehots = pair.segs.as_ref().map(|(f, m)| -> Result<_> {
        Ok((f.crop(patch.origin, patch.size)?.one_hot::<f32>(), m.one_hot::<f32>()))
    });
    let onehots = onehots.transpose()?;
    let out = total_loss_region(
        &LossInputs {
            fixed: &fixed_patch,
            moving: &pair.moving,
            origin: patch.origin,
            fixed_onehot: onehots.as_ref().map(|o| &o.0),
            moving_onehot: onehots.as_ref().map(|o| &o.1),
        },
        &flow,
        weights,
    )?;
    let mut total = out.total;
    let mut level_grads: Vec<Option<FlowField<f32>>> = vec![None; model.levels.len()];
    if weights.aux_coarse_weight > 0.0 && model.levels.len() > 1 {
        let factor = model.config.level_factor(0);
        let f = avg_downsample(&pair.fixed, factor)?;
        let m = avg_downsample(&pair.moving, factor)?;
        let (aux, mut g) = similarity_term(&f, &m, [0, 0, 0], &diag.level_flows[0], weights)?;
        g.grid_mut().scale(weights.aux_coarse_weight as f32);
        total += weights.aux_coarse_weight * aux;
        level_grads[0] = Some(g);
    }
    let grads = register_pair_backward(model, &trace, &out.grad_flow, &level_grads)?;
    Ok((
        LossRecord {
            iteration: 0,
            total,
            sim: out.sim,
            smooth: out.smooth,
            seg: out.seg,
        },
        flatten(&grads),
    ))
}

/// Continues training from `state` until `config.iterations` iterations have
/// completed. `on_iteration` sees every record and the updated state (for
/// logging and periodic checkpoints).
pub fn train(
    pairs: &[TrainPair],
    mut state: TrainState,
    config: &TrainConfig,
    mut on_iteration: impl FnMut(&LossRecord, &TrainState) -> Result<()>,
) -> Result<(TrainState, Vec<LossRecord>)> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = state.model.param_count();
    if state.adam.m.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: state.adam.m.len(),
        });
    }
    let mut log = Vec::new();
    let mut params = state.model.to_flat();
    while state.iteration() < config.iterations {
        let it = state.iteration();
        let mut rng = iteration_rng(config.seed, it);
        let pair = &pairs[rng.random_range(0..pairs.len())];
        let shape = pair.fixed.shape();
        let size = resolve_patch(shape, &state.model, config.patch_size)?;
        let origin = [0, 1, 2].map(|i| rng.random_range(0..=shape[i] - size[i]));
        let (mut record, grads) = loss_and_grad(pair, &state.model, &config.loss, Patch { origin, size }, &mut rng)?;
        record.iteration = it;
        if !record.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                detail: format!(
                    "total={} sim={} smooth={} seg={:?}",
                    record.total, record.sim, record.smooth, record.seg
                ),
            });
        }
        adam_step(&mut params, &grads, &mut state.adam, &config.adam)?;
        state.model.set_flat(&params)?;
        on_iteration(&record, &state)?;
        log.push(record);
    }
    Ok((state, log))
}

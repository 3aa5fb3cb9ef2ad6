//! The cellular-automaton registration model.
//!
//! Each pyramid level owns one update rule: a perception convolution over the
//! cell neighbourhood, concatenated with the cell state and pushed through
//! two per-cell dense layers. The result is added to the state of every cell
//! that fires this step. Channels 0 and 1 hold the fixed and moving images and
//! are restored after each step; channels 2..=4 carry the displacement
//! readout; the rest is free hidden state.
//!
//! The coarsest level runs on block-averaged images. Its flow is upsampled
//! into the flow channels of the next level's initial state, which then
//! refines it at higher resolution. During training the finest level runs on
//! a patch; at inference it runs on the whole volume.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kvtext::KvText;
use crate::real::{gemm, MatRef, Real};
use crate::volgrid::{
    avg_downsample, concat_backward, concat_channels, conv3d,
    conv3d_backward, crop_patch, crop_patch_backward, dense_grid_backward, im2col_chunk, relu,
    relu_backward, voxel_chunk, ConvKernel3D, DensePair, Grid,
};
use crate::warpfield::{upsample_flow, upsample_flow_backward, warp_trilinear, FlowField, LabelMap};

/// Channel index of the first displacement component in the cell state.
pub const FLOW_CHANNEL: usize = 2;
/// Number of image channels at the front of the cell state.
pub const IMAGE_CHANNELS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlowMode {
    /// Read channels 2..=4 of the final state.
    Direct,
    /// Apply a 1x1x1 convolution from the full state to three channels.
    ConvHead,
}

impl fmt::Display for FlowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowMode::Direct => "direct",
            FlowMode::ConvHead => "conv_head",
        })
    }
}

impl FromStr for FlowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(FlowMode::Direct),
            "conv_head" => Ok(FlowMode::ConvHead),
            other => Err(Error::InvalidConfig(format!("unknown flow mode {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. `NCA^steps_kernel(channels, hidden)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    pub steps: usize,
    pub fire_rate: f64,
    pub downsample_factor: usize,
    pub levels: usize,
    pub flow_mode: FlowMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            hidden: 128,
            kernel: 3,
            steps: 5,
            fire_rate: 0.5,
            downsample_factor: 4,
            levels: 2,
            flow_mode: FlowMode::Direct,
        }
    }
}

impl ArchConfig {
    /// The larger 7^3-kernel, 10-step variant.
    pub fn large_kernel() -> Self {
        Self {
            kernel: 7,
            steps: 10,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels < IMAGE_CHANNELS + 3 {
            return bad(format!("channels must be >= 5, got {}", self.channels));
        }
        if self.hidden == 0 {
            return bad("hidden must be positive".into());
        }
        if self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.fire_rate) {
            return bad(format!("fire_rate must lie in [0, 1], got {}", self.fire_rate));
        }
        if self.downsample_factor == 0 {
            return bad("downsample_factor must be positive".into());
        }
        if self.levels == 0 {
            return bad("levels must be >= 1".into());
        }
        Ok(())
    }

    /// Trainable scalars in one level.
    pub fn params_per_level(&self) -> usize {
        let c = self.channels;
        let h = self.hidden;
        let perception = c * c * self.kernel.pow(3) + c;
        let fc1 = 2 * c * h + h;
        let fc2 = h * c + c;
        let head = match self.flow_mode {
            FlowMode::Direct => 0,
            FlowMode::ConvHead => 3 * c + 3,
        };
        perception + fc1 + fc2 + head
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.params_per_level()
    }

    /// Every spatial dimension must be a multiple of this.
    pub fn size_multiple(&self) -> usize {
        self.downsample_factor.pow(self.levels as u32 - 1)
    }

    /// Downsampling factor of `level` relative to full resolution.
    pub fn level_factor(&self, level: usize) -> usize {
        self.downsample_factor.pow((self.levels - 1 - level) as u32)
    }

    pub const KEYS: [&'static str; 8] = [
        "channels",
        "hidden",
        "kernel",
        "steps",
        "fire_rate",
        "downsample_factor",
        "levels",
        "flow_mode",
    ];

    /// Writes every field into `kv`.
    pub fn write_kv(&self, kv: &mut KvText) {
        kv.set("channels", self.channels);
        kv.set("hidden", self.hidden);
        kv.set("kernel", self.kernel);
        kv.set("steps", self.steps);
        kv.set("fire_rate", self.fire_rate);
        kv.set("downsample_factor", self.downsample_factor);
        kv.set("levels", self.levels);
        kv.set("flow_mode", self.flow_mode);
    }

    /// Overrides fields present in `kv` (other keys are ignored).
    pub fn update_from_kv(&mut self, kv: &KvText) -> Result<()> {
        if let Some(v) = kv.get("channels")? {
            self.channels = v;
        }
        if let Some(v) = kv.get("hidden")? {
            self.hidden = v;
        }
        if let Some(v) = kv.get("kernel")? {
            self.kernel = v;
        }
        if let Some(v) = kv.get("steps")? {
            self.steps = v;
        }
        if let Some(v) = kv.get("fire_rate")? {
            self.fire_rate = v;
        }
        if let Some(v) = kv.get("downsample_factor")? {
            self.downsample_factor = v;
        }
        if let Some(v) = kv.get("levels")? {
            self.levels = v;
        }
        if let Some(v) = kv.get("flow_mode")? {
            self.flow_mode = v;
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        let mut kv = KvText::default();
        self.write_kv(&mut kv);
        kv.to_text()
    }

    /// Strict inverse of [`ArchConfig::to_kv_text`]: every key required, no
    /// others allowed.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let kv = KvText::parse(text)?;
        kv.reject_unknown(&Self::KEYS)?;
        let config = Self {
            channels: kv.require("channels")?,
            hidden: kv.require("hidden")?,
            kernel: kv.require("kernel")?,
            steps: kv.require("steps")?,
            fire_rate: kv.require("fire_rate")?,
            downsample_factor: kv.require("downsample_factor")?,
            levels: kv.require("levels")?,
            flow_mode: kv.require("flow_mode")?,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Parameters of one level's update rule (also used to hold gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct NcaLevelParams<T> {
    pub perception: ConvKernel3D<T>,
    pub fc1: DensePair<T>,
    pub fc2: DensePair<T>,
    pub flow_head: Option<ConvKernel3D<T>>,
}

impl<T: Real> NcaLevelParams<T> {
    pub fn zeros(config: &ArchConfig) -> Result<Self> {
        let c = config.channels;
        Ok(Self {
            perception: ConvKernel3D::zeros(c, c, config.kernel)?,
            fc1: DensePair::zeros(config.hidden, 2 * c),
            fc2: DensePair::zeros(c, config.hidden),
            flow_head: match config.flow_mode {
                FlowMode::Direct => None,
                FlowMode::ConvHead => Some(ConvKernel3D::zeros(3, c, 1)?),
            },
        })
    }

    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut t: Vec<&[T]> = vec![
            &self.perception.weights,
            &self.perception.bias,
            &self.fc1.weights,
            &self.fc1.bias,
            &self.fc2.weights,
            &self.fc2.bias,
        ];
        if let Some(head) = &self.flow_head {
            t.push(&head.weights);
            t.push(&head.bias);
        }
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut t: Vec<&mut [T]> = vec![
            &mut self.perception.weights,
            &mut self.perception.bias,
            &mut self.fc1.weights,
            &mut self.fc1.bias,
            &mut self.fc2.weights,
            &mut self.fc2.bias,
        ];
        if let Some(head) = &mut self.flow_head {
            t.push(&mut head.weights);
            t.push(&mut head.bias);
        }
        t
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> NcaLevelParams<U> {
        NcaLevelParams {
            perception: self.perception.cast(),
            fc1: self.fc1.cast(),
            fc2: self.fc2.cast(),
            flow_head: self.flow_head.as_ref().map(|h| h.cast()),
        }
    }
}

/// The full coarse-to-fine model.
#[derive(Clone, Debug, PartialEq)]
pub struct NcaModel<T = f32> {
    pub config: ArchConfig,
    pub levels: Vec<NcaLevelParams<T>>,
}

/// Per-level gradients, same layout as [`NcaModel::levels`].
pub type ModelGrads<T> = Vec<NcaLevelParams<T>>;

fn kaiming_uniform(rng: &mut ChaCha8Rng, values: &mut [f32], fan_in: usize) {
    let bound = (6.0 / fan_in as f64).sqrt();
    for v in values {
        *v = rng.random_range(-bound..bound) as f32;
    }
}

/// Seeded initialisation: perception and first dense layer Kaiming-uniform,
/// everything else zero, so the untrained model predicts a zero flow.
pub fn init_model(seed: u64, config: &ArchConfig) -> Result<NcaModel<f32>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels = Vec::with_capacity(config.levels);
    for _ in 0..config.levels {
        let mut p = NcaLevelParams::<f32>::zeros(config)?;
        kaiming_uniform(&mut rng, &mut p.perception.weights, config.channels * config.kernel.pow(3));
        kaiming_uniform(&mut rng, &mut p.fc1.weights, 2 * config.channels);
        levels.push(p);
    }
    Ok(NcaModel {
        config: config.clone(),
        levels,
    })
}

impl<T: Real> NcaModel<T> {
    pub fn param_count(&self) -> usize {
        self.levels.iter().map(|l| l.param_count()).sum()
    }

    /// All parameters, level-major in canonical tensor order.
    pub fn to_flat(&self) -> Vec<T> {
        flatten(&self.levels)
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for level in &mut self.levels {
            for t in level.tensors_mut() {
                t.copy_from_slice(&flat[offset..offset + t.len()]);
                offset += t.len();
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> NcaModel<U> {
        NcaModel {
            config: self.config.clone(),
            levels: self.levels.iter().map(|l| l.cast()).collect(),
        }
    }

    /// Copy with a different inference fire rate.
    pub fn with_fire_rate(&self, fire_rate: f64) -> Result<Self> {
        let mut m = self.clone();
        m.config.fire_rate = fire_rate;
        m.config.validate()?;
        Ok(m)
    }

    pub fn zero_grads(&self) -> Result<ModelGrads<T>> {
        (0..self.levels.len())
            .map(|_| NcaLevelParams::zeros(&self.config))
            .collect()
    }
}

/// Flattens per-level tensors (parameters or gradients) in canonical order.
pub fn flatten<T: Real>(levels: &[NcaLevelParams<T>]) -> Vec<T> {
    let mut out = Vec::new();
    for level in levels {
        for t in level.tensors() {
            out.extend_from_slice(t);
        }
    }
    out
}

/// Draws one Bernoulli(`fire_rate`) per cell.
pub fn fire_mask<R: Rng + ?Sized>(cells: usize, fire_rate: f64, rng: &mut R) -> Vec<bool> {
    (0..cells).map(|_| rng.random::<f64>() < fire_rate).collect()
}

/// Initial cell state: images in channels 0-1, optional flow in 2..=4, zeros
/// elsewhere.
pub fn build_state<T: Real>(
    fixed: &Grid<T>,
    moving: &Grid<T>,
    flow: Option<&FlowField<T>>,
    channels: usize,
) -> Result<Grid<T>> {
    fixed.ensure_same_shape(moving.shape())?;
    for g in [fixed, moving] {
        if g.channels() != 1 {
            return Err(Error::ChannelMismatch {
                expected: 1,
                actual: g.channels(),
            });
        }
    }
    let mut state = Grid::zeros(channels, fixed.shape());
    state.channel_mut(0).copy_from_slice(fixed.data());
    state.channel_mut(1).copy_from_slice(moving.data());
    if let Some(flow) = flow {
        fixed.ensure_same_shape(flow.shape())?;
        let n = fixed.voxels();
        state.data_mut()[FLOW_CHANNEL * n..(FLOW_CHANNEL + 3) * n].copy_from_slice(flow.grid().data());
    }
    Ok(state)
}

/// Intermediates of one step kept for the backward pass.
struct StepRecord<T> {
    input: Grid<T>,
    perception: Grid<T>,
    hidden_pre: Grid<T>,
    mask: Vec<bool>,
}

fn check_state<T: Real>(state: &Grid<T>, params: &NcaLevelParams<T>) -> Result<()> {
    if state.channels() != params.perception.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: params.perception.in_channels(),
            actual: state.channels(),
        });
    }
    Ok(())
}

/// One update over all cells, processed in voxel chunks: perception conv,
/// dense, ReLU, dense, masked residual. Returns the new state and, when
/// `record` is set, the perception output and hidden pre-activations.
fn step_forward<T: Real>(
    state: &Grid<T>,
    params: &NcaLevelParams<T>,
    mask: &[bool],
    record: bool,
) -> (Grid<T>, Option<(Grid<T>, Grid<T>)>) {
    let c = state.channels();
    let k = params.perception.side();
    let h = params.fc1.out_dim();
    let n_vox = state.voxels();
    let rows = c * k * k * k;
    let chunk = voxel_chunk(rows);

    let mut next = state.clone();
    let mut tape = record.then(|| (Grid::zeros(c, state.shape()), Grid::zeros(h, state.shape())));
    let mut col = Vec::new();
    let mut perc = Vec::new();
    let mut hid = Vec::new();
    let mut upd = Vec::new();
    let w1 = &params.fc1.weights;

    let mut start = 0;
    while start < n_vox {
        let end = (start + chunk).min(n_vox);
        let n = end - start;
        if !mask[start..end].iter().any(|&m| m) && !record {
            start = end;
            continue;
        }
        col.resize(rows * n, T::zero());
        im2col_chunk(state, k, start, end, &mut col);

        perc.clear();
        for o in 0..c {
            perc.extend(std::iter::repeat_n(params.perception.bias[o], n));
        }
        gemm(c, rows, n, T::one(), MatRef::rows(&params.perception.weights, rows), MatRef::rows(&col, n), T::one(), &mut perc, n, 1);

        hid.clear();
        for o in 0..h {
            hid.extend(std::iter::repeat_n(params.fc1.bias[o], n));
        }
        gemm(h, c, n, T::one(), MatRef::new(w1, 2 * c, 1), MatRef::rows(&perc, n), T::one(), &mut hid, n, 1);
        gemm(h, c, n, T::one(), MatRef::new(&w1[c..], 2 * c, 1), MatRef::new(&state.data()[start..], n_vox, 1), T::one(), &mut hid, n, 1);

        if let Some((tp, th)) = tape.as_mut() {
            for o in 0..c {
                tp.data_mut()[o * n_vox + start..o * n_vox + end].copy_from_slice(&perc[o * n..(o + 1) * n]);
            }
            for o in 0..h {
                th.data_mut()[o * n_vox + start..o * n_vox + end].copy_from_slice(&hid[o * n..(o + 1) * n]);
            }
        }
        for v in hid.iter_mut() {
            *v = v.max(T::zero());
        }

        upd.clear();
        for o in 0..c {
            upd.extend(std::iter::repeat_n(params.fc2.bias[o], n));
        }
        gemm(c, h, n, T::one(), MatRef::rows(&params.fc2.weights, h), MatRef::rows(&hid, n), T::one(), &mut upd, n, 1);

        let nd = next.data_mut();
        for o in IMAGE_CHANNELS..c {
            let dst = &mut nd[o * n_vox + start..o * n_vox + end];
            for ((d, &u), &m) in dst.iter_mut().zip(&upd[o * n..(o + 1) * n]).zip(&mask[start..end]) {
                if m {
                    *d += u;
                }
            }
        }
        start = end;
    }
    (next, tape)
}

/// Single stochastic update of every cell.
pub fn nca_step<T: Real, R: Rng + ?Sized>(
    state: &Grid<T>,
    params: &NcaLevelParams<T>,
    fire_rate: f64,
    rng: &mut R,
) -> Result<Grid<T>> {
    check_state(state, params)?;
    let mask = fire_mask(state.voxels(), fire_rate, rng);
    Ok(step_forward(state, params, &mask, false).0)
}

/// `steps` sequential updates.
pub fn run_level<T: Real, R: Rng + ?Sized>(
    state: &Grid<T>,
    params: &NcaLevelParams<T>,
    steps: usize,
    fire_rate: f64,
    rng: &mut R,
) -> Result<Grid<T>> {
    check_state(state, params)?;
    let mut s = state.clone();
    for _ in 0..steps {
        let mask = fire_mask(s.voxels(), fire_rate, rng);
        s = step_forward(&s, params, &mask, false).0;
    }
    Ok(s)
}

fn run_level_recorded<T: Real, R: Rng + ?Sized>(
    state: Grid<T>,
    params: &NcaLevelParams<T>,
    steps: usize,
    fire_rate: f64,
    rng: &mut R,
) -> (Grid<T>, Vec<StepRecord<T>>) {
    let mut records = Vec::with_capacity(steps);
    let mut s = state;
    for _ in 0..steps {
        let mask = fire_mask(s.voxels(), fire_rate, rng);
        let (next, tape) = step_forward(&s, params, &mask, true);
        let (perception, hidden_pre) = tape.expect("recorded step");
        records.push(StepRecord {
            input: s,
            perception,
            hidden_pre,
            mask,
        });
        s = next;
    }
    (s, records)
}

/// Backward through one step; accumulates parameter gradients into `grads`
/// and returns the gradient w.r.t. the step's input state.
fn step_backward<T: Real>(
    rec: &StepRecord<T>,
    params: &NcaLevelParams<T>,
    grad_next: &Grid<T>,
    grads: &mut NcaLevelParams<T>,
) -> Result<Grid<T>> {
    let c = rec.input.channels();
    let n = rec.input.voxels();
    // Image channels are restored after every step: no gradient flows back
    // through them.
    let mut grad_state = grad_next.clone();
    grad_state.data_mut()[..IMAGE_CHANNELS * n].fill(T::zero());
    let mut grad_upd = grad_state.clone();
    for ch in IMAGE_CHANNELS..c {
        for (g, &m) in grad_upd.channel_mut(ch).iter_mut().zip(&rec.mask) {
            if !m {
                *g = T::zero();
            }
        }
    }

    let hidden = relu(&rec.hidden_pre);
    let fc2 = dense_grid_backward(&hidden, &params.fc2, &grad_upd)?;
    add_into(&mut grads.fc2.weights, &fc2.weights);
    add_into(&mut grads.fc2.bias, &fc2.bias);
    let grad_pre = relu_backward(&rec.hidden_pre, &fc2.input)?;

    let joined = concat_channels(&rec.perception, &rec.input)?;
    let fc1 = dense_grid_backward(&joined, &params.fc1, &grad_pre)?;
    add_into(&mut grads.fc1.weights, &fc1.weights);
    add_into(&mut grads.fc1.bias, &fc1.bias);
    let (grad_perc, grad_direct) = concat_backward(&fc1.input, c);
    grad_state.add_assign(&grad_direct)?;

    let conv = conv3d_backward(&rec.input, &params.perception, &grad_perc)?;
    add_into(&mut grads.perception.weights, &conv.weights);
    add_into(&mut grads.perception.bias, &conv.bias);
    grad_state.add_assign(&conv.input)?;
    Ok(grad_state)
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Reads the displacement field out of a final cell state.
pub fn extract_flow<T: Real>(
    state: &Grid<T>,
    mode: FlowMode,
    flow_head: Option<&ConvKernel3D<T>>,
) -> Result<FlowField<T>> {
    match mode {
        FlowMode::Direct => {
            if state.channels() < FLOW_CHANNEL + 3 {
                return Err(Error::ChannelMismatch {
                    expected: FLOW_CHANNEL + 3,
                    actual: state.channels(),
                });
            }
            FlowField::new(state.select_channels(FLOW_CHANNEL, FLOW_CHANNEL + 3))
        }
        FlowMode::ConvHead => {
            let head = flow_head.ok_or(Error::MissingFlowHead)?;
            FlowField::new(conv3d(state, head)?)
        }
    }
}

fn extract_flow_backward<T: Real>(
    state: &Grid<T>,
    params: &NcaLevelParams<T>,
    mode: FlowMode,
    grad_flow: &FlowField<T>,
    grads: &mut NcaLevelParams<T>,
) -> Result<Grid<T>> {
    match mode {
        FlowMode::Direct => {
            let mut g = Grid::zeros(state.channels(), state.shape());
            let n = state.voxels();
            g.data_mut()[FLOW_CHANNEL * n..(FLOW_CHANNEL + 3) * n].copy_from_slice(grad_flow.grid().data());
            Ok(g)
        }
        FlowMode::ConvHead => {
            let head = params.flow_head.as_ref().ok_or(Error::MissingFlowHead)?;
            let conv = conv3d_backward(state, head, grad_flow.grid())?;
            let gh = grads.flow_head.as_mut().ok_or(Error::MissingFlowHead)?;
            add_into(&mut gh.weights, &conv.weights);
            add_into(&mut gh.bias, &conv.bias);
            Ok(conv.input)
        }
    }
}

/// Sub-volume on which the finest level runs during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Patch {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

/// Side products of a registration.
#[derive(Clone, Debug)]
pub struct Diagnostics<T> {
    /// Flow read out at each level, at that level's resolution (the finest
    /// level's entry covers the patch when one was used).
    pub level_flows: Vec<FlowField<T>>,
    pub level_seconds: Vec<f64>,
}

struct LevelTrace<T> {
    /// Full (uncropped) shape at this level's resolution.
    full_shape: [usize; 3],
    patch: Option<Patch>,
    records: Vec<StepRecord<T>>,
    final_state: Grid<T>,
}

/// Forward pass retaining everything needed by [`register_pair_backward`].
pub struct RegistrationTrace<T> {
    levels: Vec<LevelTrace<T>>,
}

fn check_pair<T: Real>(fixed: &Grid<T>, moving: &Grid<T>, config: &ArchConfig) -> Result<()> {
    fixed.ensure_same_shape(moving.shape())?;
    let m = config.size_multiple();
    if fixed.shape().iter().any(|&s| s % m != 0) {
        return Err(Error::NotDivisible {
            shape: fixed.shape(),
            factor: m,
        });
    }
    Ok(())
}

fn register_impl<T: Real, R: Rng + ?Sized>(
    fixed: &Grid<T>,
    moving: &Grid<T>,
    model: &NcaModel<T>,
    rng: &mut R,
    patch: Option<Patch>,
    record: bool,
) -> Result<(FlowField<T>, Diagnostics<T>, Option<RegistrationTrace<T>>)> {
    let config = &model.config;
    config.validate()?;
    check_pair(fixed, moving, config)?;
    if model.levels.len() != config.levels {
        return Err(Error::InvalidConfig(format!(
            "model has {} levels, config declares {}",
            model.levels.len(),
            config.levels
        )));
    }
    if let Some(p) = patch {
        crop_patch(&Grid::<T>::zeros(0, fixed.shape()), p.origin, p.size)?;
    }

    let mut diag = Diagnostics {
        level_flows: Vec::with_capacity(config.levels),
        level_seconds: Vec::with_capacity(config.levels),
    };
    let mut traces = Vec::new();
    let mut prior: Option<FlowField<T>> = None;
    for (li, params) in model.levels.iter().enumerate() {
        let started = Instant::now();
        let factor = config.level_factor(li);
        let (f_img, m_img) = if factor == 1 {
            (fixed.clone(), moving.clone())
        } else {
            (avg_downsample(fixed, factor)?, avg_downsample(moving, factor)?)
        };
        let full_shape = f_img.shape();
        let prior_up = prior.take().map(|p| upsample_flow(&p, config.downsample_factor));
        let is_last = li + 1 == config.levels;
        let level_patch = if is_last { patch } else { None };
        let state0 = match level_patch {
            None => build_state(&f_img, &m_img, prior_up.as_ref(), config.channels)?,
            Some(p) => {
                let f = crop_patch(&f_img, p.origin, p.size)?;
                let m = crop_patch(&m_img, p.origin, p.size)?;
                let fl = match &prior_up {
                    Some(u) => Some(FlowField::new(crop_patch(u.grid(), p.origin, p.size)?)?),
                    None => None,
                };
                build_state(&f, &m, fl.as_ref(), config.channels)?
            }
        };
        let final_state = if record {
            let (s, records) = run_level_recorded(state0, params, config.steps, config.fire_rate, rng);
            traces.push(LevelTrace {
                full_shape,
                patch: level_patch,
                records,
                final_state: s.clone(),
            });
            s
        } else {
            run_level(&state0, params, config.steps, config.fire_rate, rng)?
        };
        let flow = extract_flow(&final_state, config.flow_mode, params.flow_head.as_ref())?;
        diag.level_seconds.push(started.elapsed().as_secs_f64());
        diag.level_flows.push(flow.clone());
        prior = Some(flow);
    }
    let flow = prior.expect("at least one level");
    let trace = record.then_some(RegistrationTrace { levels: traces });
    Ok((flow, diag, trace))
}

/// Registers `moving` onto `fixed` (single-channel grids) and returns the
/// displacement field. With a patch, the finest level only runs on it and
/// the returned flow covers the patch.
pub fn register_pair<T: Real, R: Rng + ?Sized>(
    fixed: &Grid<T>,
    moving: &Grid<T>,
    model: &NcaModel<T>,
    rng: &mut R,
    patch: Option<Patch>,
) -> Result<(FlowField<T>, Diagnostics<T>)> {
    let (flow, diag, _) = register_impl(fixed, moving, model, rng, patch, false)?;
    Ok((flow, diag))
}

/// [`register_pair`] that also records the intermediates for backprop.
pub fn register_pair_traced<T: Real, R: Rng + ?Sized>(
    fixed: &Grid<T>,
    moving: &Grid<T>,
    model: &NcaModel<T>,
    rng: &mut R,
    patch: Option<Patch>,
) -> Result<(FlowField<T>, Diagnostics<T>, RegistrationTrace<T>)> {
    let (flow, diag, trace) = register_impl(fixed, moving, model, rng, patch, true)?;
    Ok((flow, diag, trace.expect("recorded")))
}

/// Parameter gradients given the gradient of the final flow and, optionally,
/// extra gradients on each level's own flow readout (`level_grads[i]` shaped
/// like `Diagnostics::level_flows[i]`).
pub fn register_pair_backward<T: Real>(
    model: &NcaModel<T>,
    trace: &RegistrationTrace<T>,
    grad_flow: &FlowField<T>,
    level_grads: &[Option<FlowField<T>>],
) -> Result<ModelGrads<T>> {
    let config = &model.config;
    let mut grads = model.zero_grads()?;
    let mut upstream = grad_flow.clone();
    for li in (0..trace.levels.len()).rev() {
        let lt = &trace.levels[li];
        let params = &model.levels[li];
        if let Some(Some(extra)) = level_grads.get(li) {
            upstream.grid_mut().add_assign(extra.grid())?;
        }
        let mut g = extract_flow_backward(&lt.final_state, params, config.flow_mode, &upstream, &mut grads[li])?;
        for rec in lt.records.iter().rev() {
            g = step_backward(rec, params, &g, &mut grads[li])?;
        }
        if li == 0 {
            break;
        }
        // Initial flow channels came from the upsampled (and possibly
        // cropped) readout of the previous level.
        let flow_grad = g.select_channels(FLOW_CHANNEL, FLOW_CHANNEL + 3);
        let flow_grad = match lt.patch {
            Some(p) => crop_patch_backward(&flow_grad, lt.full_shape, p.origin)?,
            None => flow_grad,
        };
        upstream = upsample_flow_backward(&FlowField::new(flow_grad)?, config.downsample_factor);
    }
    Ok(grads)
}

/// Per-voxel spread of repeated stochastic registrations.
#[derive(Clone, Debug)]
pub struct StabilityReport {
    /// Standard deviation of each flow component (3 channels).
    pub flow_std: Grid<f32>,
    /// Standard deviation of each warped one-hot label channel.
    pub seg_std: Option<Grid<f32>>,
    pub summary: StabilitySummary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StabilitySummary {
    pub runs: usize,
    pub mean_flow_std: f64,
    pub max_flow_std: f64,
    pub mean_seg_std: Option<f64>,
    pub max_seg_std: Option<f64>,
}

fn pointwise_std(samples: &[Grid<f32>]) -> Grid<f32> {
    let n = samples.len() as f64;
    let first = &samples[0];
    let mut out = Grid::zeros(first.channels(), first.shape());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let mean = samples.iter().map(|s| s.data()[i] as f64).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|s| {
                let d = s.data()[i] as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        *o = var.sqrt() as f32;
    }
    out
}

fn mean_max(g: &Grid<f32>) -> (f64, f64) {
    let n = g.len().max(1) as f64;
    let sum: f64 = g.data().iter().map(|&v| v as f64).sum();
    let max = g.data().iter().fold(0.0f64, |m, &v| m.max(v as f64));
    (sum / n, max)
}

/// Runs one full-resolution registration per seed and measures how much the
/// flow (and the warped segmentation, when given) varies between runs.
pub fn stability_probe(
    fixed: &Grid<f32>,
    moving: &Grid<f32>,
    moving_seg: Option<&LabelMap>,
    model: &NcaModel<f32>,
    seeds: &[u64],
) -> Result<StabilityReport> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig("stability probe needs at least two runs".into()));
    }
    let onehot = moving_seg.map(|s| s.one_hot::<f32>());
    let mut flows = Vec::with_capacity(seeds.len());
    let mut segs = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (flow, _) = register_pair(fixed, moving, model, &mut rng, None)?;
        if let Some(oh) = &onehot {
            segs.push(warp_trilinear(oh, &flow)?);
        }
        flows.push(flow.into_grid());
    }
    let flow_std = pointwise_std(&flows);
    let seg_std = (!segs.is_empty()).then(|| pointwise_std(&segs));
    let (mean_flow_std, max_flow_std) = mean_max(&flow_std);
    let seg_stats = seg_std.as_ref().map(mean_max);
    Ok(StabilityReport {
        flow_std,
        summary: StabilitySummary {
            runs: seeds.len(),
            mean_flow_std,
            max_flow_std,
            mean_seg_std: seg_stats.map(|s| s.0),
            max_seg_std: seg_stats.map(|s| s.1),
        },
        seg_std,
    })
}

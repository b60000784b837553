//! Desk-scale denoising network and the deterministic sampling loop.
//!
//! Each of the `L` layers applies a mixing stage (pointwise channel map,
//! then 3-point averaging along `H` and along `W`) followed by one SCM
//! chain. The network output is read as the clean-latent prediction and
//! fed to a DDIM-style update on a variance-preserving cosine schedule.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{
    block_update, chain_forward, BlockKind, ChainWeights, LatentDims, LatentTensor, PriorSet,
};
use crate::cache::RollingCache;
use crate::cost::{CostCounters, FlopKind};
use crate::error::{Error, Result};
use crate::pruning::{pruned_chain_forward, PruneSettings, Selection};
use crate::rng::Rng;
use crate::scheduler::{apply_bypass, asr_window, LayerPath, SchedulerConfig, SchedulerState, StepKind, StepMode};
use crate::tensor::{matmul_counted, randn, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiffusionSchedule {
    pub total_steps: usize,
    /// Signal scale for `t = 0..=T`.
    pub alpha: Vec<f64>,
    /// Noise scale for `t = 0..=T`.
    pub beta: Vec<f64>,
}

impl DiffusionSchedule {
    /// `alpha_t = cos(πt/2T)`, `beta_t = sin(πt/2T)`.
    pub fn cosine(total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::param("schedule needs at least one step"));
        }
        let angle = |t: usize| 0.5 * PI * t as f64 / total_steps as f64;
        let mut alpha: Vec<f64> = (0..=total_steps).map(|t| angle(t).cos()).collect();
        let mut beta: Vec<f64> = (0..=total_steps).map(|t| angle(t).sin()).collect();
        // pin the endpoints exactly
        alpha[0] = 1.0;
        beta[0] = 0.0;
        alpha[total_steps] = 0.0;
        beta[total_steps] = 1.0;
        Ok(Self {
            total_steps,
            alpha,
            beta,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraTrajectory {
    pub elevations: Vec<f64>,
    pub azimuths: Vec<f64>,
}

impl CameraTrajectory {
    /// Fixed elevation, azimuths evenly spaced over `[0°, 360°)`.
    pub fn orbit(views: usize, elevation: f64) -> Self {
        Self {
            elevations: vec![elevation; views],
            azimuths: (0..views).map(|v| 360.0 * v as f64 / views as f64).collect(),
        }
    }

    pub fn views(&self) -> usize {
        self.azimuths.len()
    }
}

/// `C`-dimensional sinusoidal code of one camera pose. The first half of
/// the channels encodes elevation, the second half azimuth.
pub fn view_embedding(elevation: f64, azimuth: f64, channels: usize) -> Vec<f64> {
    let half = channels / 2;
    let mut out = vec![0.0; channels];
    for (slot, angle, len) in [(0, elevation, half), (half, azimuth, channels - half)] {
        let rad = angle.to_radians();
        for i in 0..len {
            let freq = (i / 2 + 1) as f64;
            out[slot + i] = if i % 2 == 0 { (freq * rad).sin() } else { (freq * rad).cos() };
        }
    }
    out
}

/// Gaussian priors with each view's pose code added to the priors that
/// carry a view axis (`k_s` and `k_m`).
pub fn synth_priors(dims: LatentDims, trajectory: &CameraTrajectory, rng: &mut Rng) -> Result<PriorSet> {
    let LatentDims { frames: f, views: v, height: h, width: w, channels: c } = dims;
    if trajectory.views() != v || trajectory.elevations.len() != v {
        return Err(Error::param(format!("trajectory has {} poses for {v} views", trajectory.views())));
    }
    let mut k_s = randn(rng, &[f, v, 1, c])?;
    let k_c = randn(rng, &[f, h, w, c])?;
    let mut k_m = randn(rng, &[v, h, w, c])?;
    let codes: Vec<Vec<f64>> = (0..v)
        .map(|vi| view_embedding(trajectory.elevations[vi], trajectory.azimuths[vi], c))
        .collect();
    for (i, x) in k_s.data_mut().iter_mut().enumerate() {
        *x += codes[(i / c) % v][i % c];
    }
    for (i, x) in k_m.data_mut().iter_mut().enumerate() {
        *x += codes[i / (h * w * c)][i % c];
    }
    Ok(PriorSet { k_s, k_c, k_m })
}

/// Construction for checking that semantic selection finds salient
/// positions. The spatial prior of every image is scaled to norm `gain`,
/// and the latent at `cells` is set to that prior's direction with norm
/// `gain / 2`; all other positions hold small noise. Under identity
/// projections the planted positions put far more weight on the prior than
/// any other position does.
pub fn planted_region(
    dims: LatentDims,
    cells: &[usize],
    gain: f64,
    rng: &mut Rng,
) -> Result<(LatentTensor, PriorSet)> {
    let LatentDims { frames: f, views: v, channels: c, .. } = dims;
    let plane = dims.plane();
    if let Some(&bad) = cells.iter().find(|&&p| p >= plane) {
        return Err(Error::Index(format!("planted cell {bad} outside plane of {plane}")));
    }
    let mut priors = synth_priors(dims, &CameraTrajectory::orbit(v, 30.0), rng)?;
    let mut z = randn(rng, &dims.shape())?.scale(0.05);
    for image in 0..f * v {
        let prior = &mut priors.k_s.data_mut()[image * c..(image + 1) * c];
        let norm = prior.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        prior.iter_mut().for_each(|x| *x *= gain / norm);
        let direction: Vec<f64> = prior.iter().map(|x| x / gain).collect();
        for &p in cells {
            let o = (image * plane + p) * c;
            for (dst, d) in z.data_mut()[o..o + c].iter_mut().zip(&direction) {
                *dst = 0.5 * gain * d;
            }
        }
    }
    Ok((LatentTensor::new(dims, z)?, priors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// Pointwise channel map `[C, C]` of the mixing stage.
    pub mixing: Tensor,
    pub chain: ChainWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: LatentDims,
    pub heads: usize,
    pub layers: Vec<LayerWeights>,
    pub seed: u64,
}

pub fn build_toy_model(dims: LatentDims, heads: usize, layers: usize, seed: u64) -> Result<ToyModel> {
    dims.validate(heads).map_err(|e| Error::param(e.to_string()))?;
    if layers == 0 {
        return Err(Error::param("model needs at least one layer"));
    }
    let c = dims.channels;
    let bound = 1.0 / (c as f64).sqrt();
    let mut rng = Rng::new(seed);
    let layers = (0..layers)
        .map(|_| {
            let mixing = Tensor::from_fn(&[c, c], |_| rng.next_symmetric(bound));
            let chain = ChainWeights::uniform(c, heads, bound, &mut rng);
            LayerWeights { mixing, chain }
        })
        .collect();
    Ok(ToyModel {
        dims,
        heads,
        layers,
        seed,
    })
}

fn reflect(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r.clamp(0, last) as usize
}

/// 3-point average along axis `axis` (2 = H, 3 = W) with reflect padding.
fn smooth_axis(x: &Tensor, axis: usize) -> Tensor {
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..len {
            let rows = [
                reflect(i as isize - 1, len),
                i,
                reflect(i as isize + 1, len),
            ];
            let dst = (o * len + i) * inner;
            for k in 0..inner {
                let s: f64 = rows.iter().map(|&r| src[(o * len + r) * inner + k]).sum();
                out[dst + k] = s / 3.0;
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}

/// Mixing stage: channel map, then smoothing along H and along W.
pub fn mix(z: &LatentTensor, channel_map: &Tensor, cost: &mut CostCounters) -> Result<LatentTensor> {
    let dims = z.dims();
    let flat = z.tensor().clone().reshape(&[dims.tokens(), dims.channels])?;
    let mapped = matmul_counted(&flat, channel_map, cost, FlopKind::Mixing)?.reshape(&dims.shape())?;
    let smoothed = smooth_axis(&smooth_axis(&mapped, 2), 3);
    // two adds and one scale per element per axis
    cost.charge(FlopKind::Mixing, 6 * dims.elements() as u64);
    LatentTensor::new(dims, smoothed)
}

/// Which acceleration machinery a run uses alongside its schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccelConfig {
    /// Whether compute steps write the cache and log similarities.
    pub caching: bool,
    pub prune: PruneSettings,
    pub random_selection: bool,
}

impl AccelConfig {
    pub fn dense() -> Self {
        Self {
            caching: false,
            prune: PruneSettings::new(1.0),
            random_selection: false,
        }
    }

    pub fn turbo(ratio: f64) -> Self {
        Self {
            caching: true,
            prune: PruneSettings::new(ratio),
            random_selection: false,
        }
    }
}

/// Mutable state threaded through the steps of one sampling run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub accel: AccelConfig,
    pub cache: RollingCache,
    pub selection_rng: Rng,
}

impl RunState {
    pub fn new(accel: AccelConfig, layers: usize, selection_seed: u64) -> Self {
        Self {
            accel,
            cache: RollingCache::new(layers),
            selection_rng: Rng::new(selection_seed),
        }
    }
}

fn dense_layer(
    m: &LatentTensor,
    priors: &PriorSet,
    w: &ChainWeights,
    state: &mut RunState,
    layer: usize,
    step: usize,
    cost: &mut CostCounters,
) -> Result<LatentTensor> {
    let out = chain_forward(m, priors, w, cost)?;
    if state.accel.caching {
        let cache = &mut state.cache;
        if !cache.is_empty(layer) {
            cache.record_similarity(layer, BlockKind::Spatial, &out.spatial.attention, step)?;
            cache.record_similarity(layer, BlockKind::Camera, &out.camera.attention, step)?;
            cache.record_similarity(layer, BlockKind::Motion, &out.motion.attention, step)?;
        }
        let a_s = out.spatial.attention;
        let a_c = out.camera.attention;
        let a_m = out.motion.attention;
        cache.replace(layer, a_s, a_c, a_m, step, cost)?;
    }
    Ok(out.motion.out)
}

/// Cached chain: each block applies `FFN(z + Ã)` with `Ã` popped from the
/// cache. The entries are pushed back unchanged because the following
/// prune step refills from them.
fn reuse_layer(
    m: &LatentTensor,
    w: &ChainWeights,
    cache: &mut RollingCache,
    layer: usize,
    cost: &mut CostCounters,
) -> Result<LatentTensor> {
    let written = cache
        .step_written(layer)
        .ok_or_else(|| Error::Protocol {
            layer,
            reason: "reuse step with an empty cache".into(),
        })?;
    let mut x = m.clone();
    let mut taken = Vec::with_capacity(3);
    for kind in BlockKind::CHAIN {
        let a = cache.retrieve(layer, kind, cost)?;
        x = block_update(&x, &a, &w.block(kind).ffn, cost)?;
        taken.push(a);
    }
    let a_m = taken.pop().expect("three entries");
    let a_c = taken.pop().expect("three entries");
    let a_s = taken.pop().expect("three entries");
    cache.store(layer, a_s, a_c, a_m, written, cost)?;
    Ok(x)
}

/// Network forward: clean-latent prediction for `z_t` under `mode`.
pub fn predict(
    model: &ToyModel,
    z_t: &LatentTensor,
    priors: &PriorSet,
    mode: &StepMode,
    state: &mut RunState,
    step: usize,
    cost: &mut CostCounters,
) -> Result<LatentTensor> {
    let mut x = z_t.clone();
    for (layer, w) in model.layers.iter().enumerate() {
        let m = mix(&x, &w.mixing, cost)?;
        x = match apply_bypass(layer, mode, &m) {
            LayerPath::PassThrough(_) => m,
            LayerPath::Run(StepKind::Dense) => dense_layer(&m, priors, &w.chain, state, layer, step, cost)?,
            LayerPath::Run(StepKind::Prune) => {
                let selection = if state.accel.random_selection {
                    Selection::Random(&mut state.selection_rng)
                } else {
                    Selection::Semantic
                };
                let (out, _) = pruned_chain_forward(
                    &m,
                    priors,
                    &w.chain,
                    state.accel.prune,
                    selection,
                    &mut state.cache,
                    layer,
                    step,
                    cost,
                )?;
                out.out
            }
            LayerPath::Run(StepKind::Reuse) => reuse_layer(&m, &w.chain, &mut state.cache, layer, cost)?,
        };
    }
    Ok(x)
}

/// `z_{t-1} = α_{t-1}·ẑ0 + (β_{t-1}/β_t)·(z_t − α_t·ẑ0)`.
pub fn ddim_update(z_t: &LatentTensor, z0_hat: &LatentTensor, t: usize, schedule: &DiffusionSchedule) -> Result<LatentTensor> {
    if t == 0 || t > schedule.total_steps {
        return Err(Error::param(format!("source step {t} outside 1..={}", schedule.total_steps)));
    }
    let (a_t, b_t) = (schedule.alpha[t], schedule.beta[t]);
    let (a_prev, b_prev) = (schedule.alpha[t - 1], schedule.beta[t - 1]);
    let ratio = b_prev / b_t;
    let eps_part = z_t.tensor().axpby(1.0, z0_hat.tensor(), -a_t)?;
    let next = z0_hat.tensor().axpby(a_prev, &eps_part, ratio)?;
    LatentTensor::new(z_t.dims(), next)
}

#[allow(clippy::too_many_arguments)]
pub fn denoise_step(
    model: &ToyModel,
    z_t: &LatentTensor,
    t: usize,
    priors: &PriorSet,
    schedule: &DiffusionSchedule,
    mode: &StepMode,
    state: &mut RunState,
    step: usize,
    cost: &mut CostCounters,
) -> Result<LatentTensor> {
    let z0_hat = predict(model, z_t, priors, mode, state, step, cost)?;
    ddim_update(z_t, &z0_hat, t, schedule)
}

/// `α_t·z0 + β_t·ε`.
pub fn forward_noise(z0: &LatentTensor, t: usize, schedule: &DiffusionSchedule, rng: &mut Rng) -> Result<LatentTensor> {
    if t > schedule.total_steps {
        return Err(Error::param(format!("step {t} outside 0..={}", schedule.total_steps)));
    }
    let eps = randn(rng, &z0.dims().shape())?;
    let z = z0.tensor().axpby(schedule.alpha[t], &eps, schedule.beta[t])?;
    LatentTensor::new(z0.dims(), z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub kind: StepKind,
    pub bypassed_layers: usize,
    pub asr: Option<f64>,
    pub flops_attention: u64,
    pub flops_ffn: u64,
    pub flops_mixing: u64,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleReport {
    pub steps: Vec<StepRecord>,
    pub scheduler: SchedulerState,
    pub counters: CostCounters,
    pub similarity_records: usize,
    pub elapsed_us: u64,
}

/// Full reverse loop from Gaussian noise, `t = T..1`.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &ToyModel,
    priors: &PriorSet,
    schedule: &DiffusionSchedule,
    scheduler: SchedulerConfig,
    state: &mut RunState,
    rng: &mut Rng,
    cost: &mut CostCounters,
) -> Result<(LatentTensor, SampleReport)> {
    let dims = model.dims;
    priors.validate(dims)?;
    let layers = model.layers.len();
    let mut sched = SchedulerState::new(scheduler)?;
    let mut z = LatentTensor::new(dims, randn(rng, &dims.shape())?)?;
    let mut records = Vec::with_capacity(schedule.total_steps);
    let started = Instant::now();
    for (step, t) in (1..=schedule.total_steps).rev().enumerate() {
        let step_started = Instant::now();
        let before = *cost;
        let asr = latest_asr(&state.cache, scheduler.delta_t, &sched, layers);
        let mode = sched.select_mode(step, asr, layers);
        z = denoise_step(model, &z, t, priors, schedule, &mode, state, step, cost)?;
        let spent = cost.flops_since(&before);
        records.push(StepRecord {
            step,
            t,
            kind: mode.kind,
            bypassed_layers: mode.bypass.len(),
            asr,
            flops_attention: spent.flops_attention,
            flops_ffn: spent.flops_ffn,
            flops_mixing: spent.flops_mixing,
            elapsed_us: step_started.elapsed().as_micros() as u64,
        });
    }
    let report = SampleReport {
        steps: records,
        scheduler: sched,
        counters: *cost,
        similarity_records: state.cache.similarity_log().len(),
        elapsed_us: started.elapsed().as_micros() as u64,
    };
    Ok((z, report))
}

/// Similarity rate over the window ending at the latest logged step,
/// excluding layers that are already bypassed.
fn latest_asr(cache: &RollingCache, delta_t: usize, sched: &SchedulerState, layers: usize) -> Option<f64> {
    let latest = cache.similarity_log().last()?.step;
    let excluded = if sched.bypass_active {
        crate::scheduler::bypass_set(layers)
    } else {
        Vec::new()
    };
    asr_window(cache.similarity_log(), latest, delta_t, &excluded)
}

const LATENT_MAGIC: &[u8; 8] = b"SCMLAT01";

/// Writes `magic, F, V, H, W, C (u64 LE), data (f64 LE)`.
pub fn write_latent(z: &LatentTensor, mut out: impl Write) -> Result<()> {
    out.write_all(LATENT_MAGIC)?;
    for d in z.dims().shape() {
        out.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in z.tensor().data() {
        out.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_latent(mut input: impl Read) -> Result<LatentTensor> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != LATENT_MAGIC {
        return Err(Error::Io("not a latent file (bad magic)".into()));
    }
    let mut word = [0u8; 8];
    let mut shape = [0usize; 5];
    for d in shape.iter_mut() {
        input.read_exact(&mut word)?;
        *d = u64::from_le_bytes(word) as usize;
    }
    let dims = LatentDims::new(shape[0], shape[1], shape[2], shape[3], shape[4]);
    let mut data = Vec::with_capacity(dims.elements());
    for _ in 0..dims.elements() {
        input.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    LatentTensor::new(dims, Tensor::new(shape.to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::chain_forward;
    use crate::scheduler::bypass_set;

    fn small() -> LatentDims {
        LatentDims::new(2, 3, 4, 4, 8)
    }

    fn fixture(dims: LatentDims, layers: usize, seed: u64) -> (ToyModel, PriorSet) {
        let model = build_toy_model(dims, 2, layers, seed).unwrap();
        let priors = synth_priors(dims, &CameraTrajectory::orbit(dims.views, 30.0), &mut Rng::new(seed + 1)).unwrap();
        (model, priors)
    }

    fn dense_config(steps: usize) -> SchedulerConfig {
        SchedulerConfig {
            warmup: steps,
            bypass: false,
            even: StepKind::Dense,
            odd: StepKind::Dense,
            ..SchedulerConfig::default()
        }
    }

    #[test]
    fn schedule_is_variance_preserving() {
        let s = DiffusionSchedule::cosine(20).unwrap();
        assert_eq!((s.alpha[0], s.beta[0]), (1.0, 0.0));
        assert_eq!((s.alpha[20], s.beta[20]), (0.0, 1.0));
        for t in 0..=20 {
            assert!((s.alpha[t].powi(2) + s.beta[t].powi(2) - 1.0).abs() <= 1e-12);
        }
        assert!(s.alpha.windows(2).all(|w| w[1] <= w[0]));
        assert!(s.beta.windows(2).all(|w| w[1] >= w[0]));
        assert!(DiffusionSchedule::cosine(0).is_err());
    }

    #[test]
    fn noising_endpoints_and_statistics() {
        let s = DiffusionSchedule::cosine(20).unwrap();
        let dims = LatentDims::new(5, 4, 10, 10, 50);
        let mut rng = Rng::new(2);
        let z0 = LatentTensor::new(dims, randn(&mut rng, &dims.shape()).unwrap().scale(0.5)).unwrap();
        assert_eq!(forward_noise(&z0, 0, &s, &mut rng).unwrap(), z0);
        assert!(forward_noise(&z0, 21, &s, &mut rng).is_err());

        let n = dims.elements() as f64;
        let pure = forward_noise(&z0, 20, &s, &mut rng).unwrap();
        let mean = pure.tensor().data().iter().sum::<f64>() / n;
        let var = pure.tensor().data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var - 1.0).abs() <= 0.03, "variance {var}");

        for t in [5, 10, 15] {
            let zt = forward_noise(&z0, t, &s, &mut rng).unwrap();
            let want = s.alpha[t].powi(2) * z0.tensor().norm().powi(2) + s.beta[t].powi(2) * n;
            let got = zt.tensor().norm().powi(2);
            assert!((got / want - 1.0).abs() <= 0.05, "t={t}: {got} vs {want}");
        }
    }

    #[test]
    fn ddim_update_with_identity_prediction() {
        let s = DiffusionSchedule::cosine(10).unwrap();
        let dims = LatentDims::new(1, 1, 2, 2, 2);
        let z = LatentTensor::new(dims, Tensor::from_fn(&dims.shape(), |i| i as f64 - 3.5)).unwrap();
        for t in 1..=10 {
            let next = ddim_update(&z, &z, t, &s).unwrap();
            let r = s.beta[t - 1] / s.beta[t];
            let factor = s.alpha[t - 1] - s.alpha[t] * r + r;
            let want = z.tensor().scale(factor);
            assert!(next.tensor().max_abs_diff(&want).unwrap() <= 1e-12);
        }
        assert!(ddim_update(&z, &z, 0, &s).is_err());
    }

    #[test]
    fn model_and_priors_are_seeded() {
        let dims = small();
        let (m1, p1) = fixture(dims, 3, 9);
        let (m2, p2) = fixture(dims, 3, 9);
        assert_eq!(m1, m2);
        assert_eq!(p1, p2);
        let (m3, _) = fixture(dims, 3, 10);
        assert_ne!(m1, m3);
        let bound = 1.0 / (dims.channels as f64).sqrt();
        assert!(m1.layers[0].mixing.data().iter().all(|x| x.abs() <= bound));
        assert!(build_toy_model(dims, 3, 2, 0).is_err());
        assert!(build_toy_model(dims, 2, 0, 0).is_err());
    }

    #[test]
    fn equal_poses_share_embeddings() {
        let traj = CameraTrajectory {
            elevations: vec![30.0, 30.0, 10.0],
            azimuths: vec![45.0, 45.0, 45.0],
        };
        let dims = LatentDims::new(1, 3, 2, 2, 8);
        let p = synth_priors(dims, &traj, &mut Rng::new(0)).unwrap();
        assert_eq!(p, synth_priors(dims, &traj, &mut Rng::new(0)).unwrap());
        // k_s is drawn first, so the same draw recovers the added codes
        let raw = randn(&mut Rng::new(0), &[1, 3, 1, 8]).unwrap();
        let codes = p.k_s.sub(&raw).unwrap();
        let code = |v: usize| codes.data()[v * 8..(v + 1) * 8].to_vec();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&code(0), &view_embedding(30.0, 45.0, 8)));
        assert!(close(&code(1), &view_embedding(30.0, 45.0, 8)));
        assert!(!close(&code(2), &view_embedding(30.0, 45.0, 8)));
        assert_eq!(view_embedding(30.0, 45.0, 8), view_embedding(30.0, 45.0, 8));
        assert_ne!(view_embedding(30.0, 45.0, 8), view_embedding(10.0, 45.0, 8));
        let orbit = CameraTrajectory::orbit(8, 30.0);
        assert_eq!(orbit.azimuths[2], 90.0);
        assert!(orbit.azimuths.iter().all(|a| (0.0..360.0).contains(a)));
    }

    #[test]
    fn mixing_preserves_constants_under_identity_map() {
        let dims = LatentDims::new(1, 2, 3, 5, 4);
        let z = LatentTensor::new(dims, Tensor::filled(&dims.shape(), 2.5)).unwrap();
        let mut cost = CostCounters::new();
        let out = mix(&z, &crate::attention::identity_matrix(4), &mut cost).unwrap();
        assert!(out.tensor().max_abs_diff(z.tensor()).unwrap() <= 1e-12);
        assert!(cost.flops_mixing > 0);
        // single-row axes are left alone
        let thin = LatentDims::new(1, 1, 1, 1, 2);
        let z = LatentTensor::new(thin, Tensor::new(vec![1, 1, 1, 1, 2], vec![1.0, -2.0]).unwrap()).unwrap();
        let out = mix(&z, &crate::attention::identity_matrix(2), &mut cost).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn smoothing_matches_hand_average() {
        let x = Tensor::new(vec![1, 1, 3, 1, 1], vec![0.0, 3.0, 6.0]).unwrap();
        let y = smooth_axis(&x, 2);
        // reflect padding: [3,0,3] [0,3,6] [3,6,3]
        let want = [2.0, 3.0, 4.0];
        assert!(y.data().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    /// Dense prediction written without any cache or scheduler machinery.
    fn reference_predict(model: &ToyModel, z: &LatentTensor, priors: &PriorSet) -> LatentTensor {
        let mut cost = CostCounters::new();
        let mut x = z.clone();
        for w in &model.layers {
            let m = mix(&x, &w.mixing, &mut cost).unwrap();
            x = chain_forward(&m, priors, &w.chain, &mut cost).unwrap().out;
        }
        x
    }

    #[test]
    fn dense_step_matches_reference() {
        let dims = small();
        let (model, priors) = fixture(dims, 3, 4);
        let s = DiffusionSchedule::cosine(5).unwrap();
        let z = LatentTensor::new(dims, randn(&mut Rng::new(8), &dims.shape()).unwrap()).unwrap();
        let mode = StepMode { kind: StepKind::Dense, bypass: vec![] };
        for accel in [AccelConfig::dense(), AccelConfig::turbo(0.2)] {
            let mut state = RunState::new(accel, 3, 0);
            let mut cost = CostCounters::new();
            let got = denoise_step(&model, &z, 5, &priors, &s, &mode, &mut state, 0, &mut cost).unwrap();
            let want = ddim_update(&z, &reference_predict(&model, &z, &priors), 5, &s).unwrap();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn reuse_on_frozen_input_reproduces_dense() {
        let dims = small();
        let (model, priors) = fixture(dims, 4, 12);
        let z = LatentTensor::new(dims, randn(&mut Rng::new(3), &dims.shape()).unwrap()).unwrap();
        let mut state = RunState::new(AccelConfig::turbo(0.2), 4, 0);
        let mut cost = CostCounters::new();
        let dense = StepMode { kind: StepKind::Dense, bypass: vec![] };
        let reuse = StepMode { kind: StepKind::Reuse, bypass: vec![] };
        let first = predict(&model, &z, &priors, &dense, &mut state, 0, &mut cost).unwrap();
        let flops_before = cost.flops_attention;
        let second = predict(&model, &z, &priors, &reuse, &mut state, 1, &mut cost).unwrap();
        assert!(first.tensor().max_abs_diff(second.tensor()).unwrap() <= 1e-9);
        assert_eq!(cost.flops_attention, flops_before);
        // reuse puts the entries back for the next prune step
        assert!((0..4).all(|l| state.cache.len(l) == 3));
    }

    #[test]
    fn reuse_without_cache_is_protocol_error() {
        let dims = small();
        let (model, priors) = fixture(dims, 2, 1);
        let z = LatentTensor::zeros(dims);
        let mut state = RunState::new(AccelConfig::turbo(0.2), 2, 0);
        let reuse = StepMode { kind: StepKind::Reuse, bypass: vec![] };
        let err = predict(&model, &z, &priors, &reuse, &mut state, 0, &mut CostCounters::new());
        assert!(matches!(err, Err(Error::Protocol { layer: 0, .. })));
    }

    #[test]
    fn bypassed_layers_skip_chain_and_cache() {
        let dims = small();
        let (model, priors) = fixture(dims, 4, 5);
        let z = LatentTensor::new(dims, randn(&mut Rng::new(1), &dims.shape()).unwrap()).unwrap();
        let mut state = RunState::new(AccelConfig::turbo(0.5), 4, 0);
        let mut cost = CostCounters::new();
        let mode = StepMode { kind: StepKind::Dense, bypass: bypass_set(4) };
        predict(&model, &z, &priors, &mode, &mut state, 0, &mut cost).unwrap();
        assert_eq!(state.cache.len(0), 3);
        assert!(state.cache.is_empty(1) && state.cache.is_empty(2));
        assert_eq!(state.cache.len(3), 3);
    }

    #[test]
    fn dense_sampling_is_deterministic_and_cache_free() {
        let dims = small();
        let (model, priors) = fixture(dims, 2, 7);
        let s = DiffusionSchedule::cosine(4).unwrap();
        let run = || {
            let mut state = RunState::new(AccelConfig::dense(), 2, 0);
            let mut cost = CostCounters::new();
            let (z, r) = sample(&model, &priors, &s, dense_config(4), &mut state, &mut Rng::new(11), &mut cost).unwrap();
            (z, r, state.cache.similarity_log().len())
        };
        let (z1, r1, logged) = run();
        let (z2, r2, _) = run();
        assert_eq!(z1, z2);
        assert_eq!(logged, 0);
        assert!(r1.steps.iter().all(|s| s.kind == StepKind::Dense));
        assert_eq!(r1.steps.len(), 4);
        let strip = |r: &SampleReport| r.steps.iter().map(|s| (s.flops_attention, s.flops_ffn, s.kind)).collect::<Vec<_>>();
        assert_eq!(strip(&r1), strip(&r2));
        assert_eq!(r1.steps.iter().map(|s| s.t).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
    }

    #[test]
    fn single_layer_model_never_bypasses() {
        let dims = small();
        let (model, priors) = fixture(dims, 1, 3);
        let s = DiffusionSchedule::cosine(8).unwrap();
        let cfg = SchedulerConfig { alpha: 0.0001, ..SchedulerConfig::default() };
        let mut state = RunState::new(AccelConfig::turbo(0.2), 1, 0);
        let (_, report) = sample(&model, &priors, &s, cfg, &mut state, &mut Rng::new(0), &mut CostCounters::new()).unwrap();
        assert!(report.scheduler.bypass_active);
        assert!(report.steps.iter().all(|s| s.bypassed_layers == 0));
    }

    #[test]
    fn latent_binary_round_trip() {
        let dims = LatentDims::new(1, 2, 2, 3, 2);
        let z = LatentTensor::new(dims, Tensor::from_fn(&dims.shape(), |i| (i as f64).sin())).unwrap();
        let mut buf = Vec::new();
        write_latent(&z, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 5 * 8 + dims.elements() * 8);
        assert_eq!(&buf[..8], b"SCMLAT01");
        assert_eq!(read_latent(buf.as_slice()).unwrap(), z);
        buf[0] = b'X';
        assert!(matches!(read_latent(buf.as_slice()), Err(Error::Io(_))));
    }

    #[test]
    fn planted_cells_carry_prior_direction() {
        let dims = LatentDims::new(1, 2, 4, 4, 8);
        let (z, priors) = planted_region(dims, &[5, 6], 20.0, &mut Rng::new(0)).unwrap();
        let c = dims.channels;
        for image in 0..2 {
            let k: Vec<f64> = priors.k_s.data()[image * c..(image + 1) * c].to_vec();
            assert!((k.iter().map(|x| x * x).sum::<f64>().sqrt() - 20.0).abs() < 1e-9);
            let o = (image * 16 + 5) * c;
            let cell = &z.tensor().data()[o..o + c];
            assert!(cell.iter().zip(&k).all(|(a, b)| (a - 0.5 * b).abs() < 1e-12));
        }
        assert!(planted_region(dims, &[16], 20.0, &mut Rng::new(0)).is_err());
    }
}

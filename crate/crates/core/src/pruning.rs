//! Top-K token selection from the spatial semantic map and the pruned
//! camera/motion forwards that refill unselected positions from the cache.

use serde::{Deserialize, Serialize};

use crate::attention::{
    axis_attention, block_update, spatial_forward, BlockKind, BlockOutput, BlockWeights, ChainOutput,
    ChainWeights, LatentDims, LatentTensor, PriorSet, SemanticMap,
};
use crate::cache::RollingCache;
use crate::cost::CostCounters;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gather_tokens, scatter_refill, topk_indices, Tensor};

/// How a keep-ratio turns into a token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioRule {
    /// `ceil(r·H·W)` tokens.
    #[default]
    Tokens,
    /// `ceil(r·H)·ceil(r·W)` tokens, i.e. the ratio applies to each axis.
    PerAxis,
}

/// Where unselected positions get their attention from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Refill {
    #[default]
    Cache,
    Zero,
}

pub enum Selection<'a> {
    Semantic,
    Random(&'a mut Rng),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneSettings {
    pub ratio: f64,
    pub rule: RatioRule,
    pub refill: Refill,
}

impl PruneSettings {
    pub fn new(ratio: f64) -> Self {
        Self {
            ratio,
            rule: RatioRule::Tokens,
            refill: Refill::Cache,
        }
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio.is_finite() && ratio > 0.0 && ratio <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("keep ratio must lie in (0, 1], got {ratio}")))
    }
}

/// Number of kept spatial tokens for an `h × w` plane.
pub fn token_count(height: usize, width: usize, ratio: f64, rule: RatioRule) -> Result<usize> {
    check_ratio(ratio)?;
    let k = match rule {
        RatioRule::Tokens => (ratio * (height * width) as f64).ceil() as usize,
        RatioRule::PerAxis => {
            (ratio * height as f64).ceil() as usize * (ratio * width as f64).ceil() as usize
        }
    };
    Ok(k.clamp(1, height * width))
}

/// Kept spatial positions per frame (camera) and per view (motion).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenIndexSet {
    pub i_c: Vec<Vec<usize>>,
    pub i_m: Vec<Vec<usize>>,
    pub k: usize,
    pub plane: usize,
    pub ratio: f64,
}

impl TokenIndexSet {
    fn new(i_c: Vec<Vec<usize>>, i_m: Vec<Vec<usize>>, k: usize, plane: usize, ratio: f64) -> Self {
        Self { i_c, i_m, k, plane, ratio }
    }

    /// Every position of an `f × v` latent with `plane` positions.
    pub fn full(frames: usize, views: usize, plane: usize) -> Self {
        let all: Vec<usize> = (0..plane).collect();
        Self::new(vec![all.clone(); frames], vec![all; views], plane, plane, 1.0)
    }

    fn complement(&self, kept: &[usize]) -> Vec<usize> {
        let mut mask = vec![true; self.plane];
        for &p in kept {
            mask[p] = false;
        }
        (0..self.plane).filter(|&p| mask[p]).collect()
    }

    pub fn camera_complement(&self, frame: usize) -> Vec<usize> {
        self.complement(&self.i_c[frame])
    }

    pub fn motion_complement(&self, view: usize) -> Vec<usize> {
        self.complement(&self.i_m[view])
    }

    fn check(&self, dims: LatentDims) -> Result<()> {
        if self.i_c.len() != dims.frames || self.i_m.len() != dims.views || self.plane != dims.plane() {
            return Err(Error::shape(format!(
                "index set ({} frames, {} views, plane {}) does not fit latent {:?}",
                self.i_c.len(),
                self.i_m.len(),
                self.plane,
                dims.shape()
            )));
        }
        Ok(())
    }
}

/// Top-K selection on the semantic map: frames rank positions by their
/// view-averaged weight, views by their frame-averaged weight.
pub fn identify_tokens(q_s: &SemanticMap, ratio: f64, rule: RatioRule) -> Result<TokenIndexSet> {
    let shape = q_s.q_s.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!("semantic map must be [F,V,H,W], got {shape:?}")));
    }
    let (f, v, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let k = token_count(h, w, ratio, rule)?;
    let data = q_s.q_s.data();
    let at = |fi: usize, vi: usize| &data[(fi * v + vi) * plane..(fi * v + vi + 1) * plane];

    let mut i_c = Vec::with_capacity(f);
    for fi in 0..f {
        let mut mean = vec![0.0; plane];
        for vi in 0..v {
            mean.iter_mut().zip(at(fi, vi)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= v as f64);
        i_c.push(topk_indices(&mean, k)?);
    }
    let mut i_m = Vec::with_capacity(v);
    for vi in 0..v {
        let mut mean = vec![0.0; plane];
        for fi in 0..f {
            mean.iter_mut().zip(at(fi, vi)).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= f as f64);
        i_m.push(topk_indices(&mean, k)?);
    }
    Ok(TokenIndexSet::new(i_c, i_m, k, plane, ratio))
}

/// Uniformly random K-subsets, one per frame then one per view.
pub fn random_tokens(dims: LatentDims, ratio: f64, rule: RatioRule, rng: &mut Rng) -> Result<TokenIndexSet> {
    let plane = dims.plane();
    let k = token_count(dims.height, dims.width, ratio, rule)?;
    let i_c = (0..dims.frames).map(|_| rng.sample_distinct(plane, k)).collect();
    let i_m = (0..dims.views).map(|_| rng.sample_distinct(plane, k)).collect();
    Ok(TokenIndexSet::new(i_c, i_m, k, plane, ratio))
}

fn check_cached(cached: &Tensor, dims: LatentDims) -> Result<()> {
    if cached.shape() != dims.shape() {
        return Err(Error::shape(format!(
            "cached attention {:?} does not match latent {:?}",
            cached.shape(),
            dims.shape()
        )));
    }
    Ok(())
}

/// Camera block on the kept positions of each frame only.
///
/// Sequences are batched in `(f, kept position)` order, the same order the
/// dense block uses, so kept positions are bit-identical to the dense result.
pub fn pruned_camera_forward(
    z_s: &LatentTensor,
    k_c: &Tensor,
    w: &BlockWeights,
    idx: &TokenIndexSet,
    cached_a_c: &Tensor,
    cost: &mut CostCounters,
) -> Result<BlockOutput> {
    let dims = z_s.dims();
    dims.validate(w.attention.heads)?;
    idx.check(dims)?;
    check_cached(cached_a_c, dims)?;
    let LatentDims { frames: f, views: v, height: h, width: wd, channels: c } = dims;
    if k_c.shape() != [f, h, wd, c] {
        return Err(Error::dim(format!("k_c expects [{f},{h},{wd},{c}], got {:?}", k_c.shape())));
    }
    let k = idx.k;
    let mut seqs = Vec::with_capacity(f);
    let mut priors = Vec::with_capacity(f);
    for (fi, kept) in idx.i_c.iter().enumerate() {
        // [V, K, C] -> [K, V, C]
        let gathered = gather_tokens(&z_s.tensor().index_first(fi)?, kept)?;
        seqs.push(gathered.permute(&[1, 0, 2])?);
        priors.push(gather_tokens(&k_c.index_first(fi)?, kept)?);
    }
    let seq = Tensor::stack(&seqs)?.reshape(&[f * k, v, c])?;
    let prior = Tensor::stack(&priors)?.reshape(&[f * k, 1, c])?;
    let (a, _) = axis_attention(&seq, &prior, &w.attention, cost)?;
    let a = a.reshape(&[f, k, v, c])?;

    let mut frames = Vec::with_capacity(f);
    for (fi, kept) in idx.i_c.iter().enumerate() {
        let computed = a.index_first(fi)?.permute(&[1, 0, 2])?;
        frames.push(scatter_refill(&computed, &cached_a_c.index_first(fi)?, kept)?);
    }
    let attention = Tensor::stack(&frames)?;
    let out = block_update(z_s, &attention, &w.ffn, cost)?;
    Ok(BlockOutput {
        out,
        attention,
        semantic: None,
    })
}

/// Motion block on the kept positions of each view only, batched in
/// `(v, kept position)` order like the dense block.
pub fn pruned_motion_forward(
    z_c: &LatentTensor,
    k_m: &Tensor,
    w: &BlockWeights,
    idx: &TokenIndexSet,
    cached_a_m: &Tensor,
    cost: &mut CostCounters,
) -> Result<BlockOutput> {
    let dims = z_c.dims();
    dims.validate(w.attention.heads)?;
    idx.check(dims)?;
    check_cached(cached_a_m, dims)?;
    let LatentDims { frames: f, views: v, height: h, width: wd, channels: c } = dims;
    if k_m.shape() != [v, h, wd, c] {
        return Err(Error::dim(format!("k_m expects [{v},{h},{wd},{c}], got {:?}", k_m.shape())));
    }
    let k = idx.k;
    let by_view = z_c.tensor().permute(&[1, 0, 2, 3, 4])?;
    let mut seqs = Vec::with_capacity(v);
    let mut priors = Vec::with_capacity(v);
    for (vi, kept) in idx.i_m.iter().enumerate() {
        // [F, K, C] -> [K, F, C]
        let gathered = gather_tokens(&by_view.index_first(vi)?, kept)?;
        seqs.push(gathered.permute(&[1, 0, 2])?);
        priors.push(gather_tokens(&k_m.index_first(vi)?, kept)?);
    }
    let seq = Tensor::stack(&seqs)?.reshape(&[v * k, f, c])?;
    let prior = Tensor::stack(&priors)?.reshape(&[v * k, 1, c])?;
    let (a, _) = axis_attention(&seq, &prior, &w.attention, cost)?;
    let a = a.reshape(&[v, k, f, c])?;

    let cached_by_view = cached_a_m.permute(&[1, 0, 2, 3, 4])?;
    let mut views = Vec::with_capacity(v);
    for (vi, kept) in idx.i_m.iter().enumerate() {
        let computed = a.index_first(vi)?.permute(&[1, 0, 2])?;
        views.push(scatter_refill(&computed, &cached_by_view.index_first(vi)?, kept)?);
    }
    let attention = Tensor::stack(&views)?.permute(&[1, 0, 2, 3, 4])?;
    let out = block_update(z_c, &attention, &w.ffn, cost)?;
    Ok(BlockOutput {
        out,
        attention,
        semantic: None,
    })
}

/// One prune step for a layer: dense spatial block, token selection,
/// pruned camera and motion blocks refilled from the layer's cached
/// attention, similarity logging, then the cache is replaced with this
/// step's full-shape attention outputs.
#[allow(clippy::too_many_arguments)]
pub fn pruned_chain_forward(
    z: &LatentTensor,
    priors: &PriorSet,
    w: &ChainWeights,
    settings: PruneSettings,
    selection: Selection<'_>,
    cache: &mut RollingCache,
    layer: usize,
    step: usize,
    cost: &mut CostCounters,
) -> Result<(ChainOutput, TokenIndexSet)> {
    let dims = z.dims();
    priors.validate(dims)?;
    let spatial = spatial_forward(z, &priors.k_s, &w.spatial, cost)?;
    let idx = match selection {
        Selection::Semantic => {
            let q_s = spatial.semantic.as_ref().expect("spatial block yields a semantic map");
            identify_tokens(q_s, settings.ratio, settings.rule)?
        }
        Selection::Random(rng) => random_tokens(dims, settings.ratio, settings.rule, rng)?,
    };

    let zeros;
    let (camera, motion) = {
        let (refill_c, refill_m) = match settings.refill {
            Refill::Cache => (cache.peek(layer, BlockKind::Camera)?, cache.peek(layer, BlockKind::Motion)?),
            Refill::Zero => {
                zeros = Tensor::zeros(&dims.shape());
                (&zeros, &zeros)
            }
        };
        let camera = pruned_camera_forward(&spatial.out, &priors.k_c, &w.camera, &idx, refill_c, cost)?;
        let motion = pruned_motion_forward(&camera.out, &priors.k_m, &w.motion, &idx, refill_m, cost)?;
        (camera, motion)
    };

    cache.record_similarity(layer, BlockKind::Spatial, &spatial.attention, step)?;
    cache.record_similarity(layer, BlockKind::Camera, &camera.attention, step)?;
    cache.record_similarity(layer, BlockKind::Motion, &motion.attention, step)?;
    cache.replace(
        layer,
        spatial.attention.clone(),
        camera.attention.clone(),
        motion.attention.clone(),
        step,
        cost,
    )?;
    Ok((
        ChainOutput {
            out: motion.out.clone(),
            spatial,
            camera,
            motion,
        },
        idx,
    ))
}

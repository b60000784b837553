//! Spatial, camera and motion attention blocks and their chained
//! composition.
//!
//! Each block computes `FFN(z + Attn(z, prior))`. `Attn` is multi-head
//! self-attention along one axis of the `[F, V, H, W, C]` latent with the
//! block's prior appended as one extra key/value token per sequence:
//!
//! | block   | sequence axis | one sequence per | prior token  |
//! |---------|---------------|------------------|--------------|
//! | spatial | `H·W`         | `(f, v)`         | `k_s[f, v]`  |
//! | camera  | `V`           | `(f, h, w)`      | `k_c[f,h,w]` |
//! | motion  | `F`           | `(v, h, w)`      | `k_m[v,h,w]` |
//!
//! The weight every spatial query puts on its prior token, averaged over
//! heads, is the semantic map that later drives token pruning.

use serde::{Deserialize, Serialize};

use crate::cost::{CostCounters, FlopKind};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, matmul_counted, matmul_flops, softmax_row, MatRef, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDims {
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LatentDims {
    pub fn new(frames: usize, views: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            frames,
            views,
            height,
            width,
            channels,
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        [self.frames, self.views, self.height, self.width, self.channels]
    }

    /// Spatial positions per image, `H·W`.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.views * self.plane()
    }

    pub fn elements(&self) -> usize {
        self.tokens() * self.channels
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        if self.shape().contains(&0) {
            return Err(Error::Config(format!("all latent axes must be >= 1: {self:?}")));
        }
        if heads == 0 || !self.channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{} channels are not divisible by {heads} heads",
                self.channels
            )));
        }
        Ok(())
    }
}

/// The `[F, V, H, W, C]` latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    dims: LatentDims,
    data: Tensor,
}

impl LatentTensor {
    pub fn new(dims: LatentDims, data: Tensor) -> Result<Self> {
        if data.shape() != dims.shape() {
            return Err(Error::shape(format!(
                "latent expects {:?}, got {:?}",
                dims.shape(),
                data.shape()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: LatentDims) -> Self {
        Self {
            dims,
            data: Tensor::zeros(&dims.shape()),
        }
    }

    pub fn dims(&self) -> LatentDims {
        self.dims
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Conditioning priors, one context token per attended-axis position.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSet {
    /// `[F, V, 1, C]`
    pub k_s: Tensor,
    /// `[F, H, W, C]`
    pub k_c: Tensor,
    /// `[V, H, W, C]`
    pub k_m: Tensor,
}

impl PriorSet {
    pub fn zeros(dims: LatentDims) -> Self {
        let LatentDims { frames: f, views: v, height: h, width: w, channels: c } = dims;
        Self {
            k_s: Tensor::zeros(&[f, v, 1, c]),
            k_c: Tensor::zeros(&[f, h, w, c]),
            k_m: Tensor::zeros(&[v, h, w, c]),
        }
    }

    pub fn validate(&self, dims: LatentDims) -> Result<()> {
        let LatentDims { frames: f, views: v, height: h, width: w, channels: c } = dims;
        let checks = [
            ("k_s", &self.k_s, vec![f, v, 1, c]),
            ("k_c", &self.k_c, vec![f, h, w, c]),
            ("k_m", &self.k_m, vec![v, h, w, c]),
        ];
        for (name, t, want) in checks {
            if t.shape() != want.as_slice() {
                return Err(Error::shape(format!(
                    "prior {name} expects {want:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Query/key/value/output projections, each `[C, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
    pub output: Tensor,
    pub heads: usize,
}

impl AttentionWeights {
    pub fn uniform(channels: usize, heads: usize, bound: f64, rng: &mut Rng) -> Self {
        let mut draw = || Tensor::from_fn(&[channels, channels], |_| rng.next_symmetric(bound));
        Self {
            query: draw(),
            key: draw(),
            value: draw(),
            output: draw(),
            heads,
        }
    }

    pub fn identity(channels: usize, heads: usize) -> Self {
        let eye = identity_matrix(channels);
        Self {
            query: eye.clone(),
            key: eye.clone(),
            value: eye.clone(),
            output: eye,
            heads,
        }
    }

    pub fn channels(&self) -> usize {
        self.query.shape()[0]
    }
}

/// Two-layer feed-forward map `C → 2C → C` with GELU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub up: Tensor,
    pub down: Tensor,
}

impl FfnWeights {
    pub fn uniform(channels: usize, bound: f64, rng: &mut Rng) -> Self {
        let up = Tensor::from_fn(&[channels, 2 * channels], |_| rng.next_symmetric(bound));
        let down = Tensor::from_fn(&[2 * channels, channels], |_| rng.next_symmetric(bound));
        Self { up, down }
    }

    pub fn zeros(channels: usize) -> Self {
        Self {
            up: Tensor::zeros(&[channels, 2 * channels]),
            down: Tensor::zeros(&[2 * channels, channels]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub attention: AttentionWeights,
    pub ffn: FfnWeights,
}

impl BlockWeights {
    pub fn uniform(channels: usize, heads: usize, bound: f64, rng: &mut Rng) -> Self {
        let attention = AttentionWeights::uniform(channels, heads, bound, rng);
        let ffn = FfnWeights::uniform(channels, bound, rng);
        Self { attention, ffn }
    }
}

/// Weights of one spatial → camera → motion chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainWeights {
    pub spatial: BlockWeights,
    pub camera: BlockWeights,
    pub motion: BlockWeights,
}

impl ChainWeights {
    pub fn uniform(channels: usize, heads: usize, bound: f64, rng: &mut Rng) -> Self {
        let spatial = BlockWeights::uniform(channels, heads, bound, rng);
        let camera = BlockWeights::uniform(channels, heads, bound, rng);
        let motion = BlockWeights::uniform(channels, heads, bound, rng);
        Self {
            spatial,
            camera,
            motion,
        }
    }

    pub fn heads(&self) -> usize {
        self.spatial.attention.heads
    }

    pub fn block(&self, kind: BlockKind) -> &BlockWeights {
        match kind {
            BlockKind::Spatial => &self.spatial,
            BlockKind::Camera => &self.camera,
            BlockKind::Motion => &self.motion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Spatial,
    Camera,
    Motion,
}

impl BlockKind {
    pub const CHAIN: [BlockKind; 3] = [BlockKind::Spatial, BlockKind::Camera, BlockKind::Motion];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Spatial => "spatial",
            BlockKind::Camera => "camera",
            BlockKind::Motion => "motion",
        }
    }
}

/// Per-token weight on the spatial prior, `[F, V, H, W]`, entries in `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub q_s: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub out: LatentTensor,
    /// Attention result before the FFN, latent-shaped.
    pub attention: Tensor,
    pub semantic: Option<SemanticMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub out: LatentTensor,
    pub spatial: BlockOutput,
    pub camera: BlockOutput,
    pub motion: BlockOutput,
}

pub(crate) fn identity_matrix(n: usize) -> Tensor {
    Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
}

/// Multi-head attention over `B` independent sequences.
///
/// `z_seq` is `[B, n, C]` and `prior` is `[B, 1, C]`. Queries come from the
/// sequence tokens; keys and values from `[tokens ; prior]`, so every query
/// sees `n + 1` keys. Returns the projected attention output `[B, n, C]` and
/// the head-averaged weight each query assigns to the prior, `[B, n]`.
pub fn axis_attention(
    z_seq: &Tensor,
    prior: &Tensor,
    w: &AttentionWeights,
    cost: &mut CostCounters,
) -> Result<(Tensor, Tensor)> {
    let zs = z_seq.shape();
    if zs.len() != 3 {
        return Err(Error::dim(format!("axis_attention expects [B,n,C], got {zs:?}")));
    }
    let (batch, n, c) = (zs[0], zs[1], zs[2]);
    if prior.shape() != [batch, 1, c] {
        return Err(Error::dim(format!(
            "prior expects [{batch},1,{c}], got {:?}",
            prior.shape()
        )));
    }
    if w.channels() != c {
        return Err(Error::dim(format!(
            "weights are {}-channel, input is {c}-channel",
            w.channels()
        )));
    }
    let heads = w.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::Config(format!("{c} channels are not divisible by {heads} heads")));
    }
    let d = c / heads;
    let keys = n + 1;
    let scale = 1.0 / (d as f64).sqrt();

    let queries_in = Tensor::new(vec![batch * n, c], z_seq.data().to_vec())?;
    let mut with_prior = Vec::with_capacity(batch * keys * c);
    for b in 0..batch {
        with_prior.extend_from_slice(&z_seq.data()[b * n * c..(b + 1) * n * c]);
        with_prior.extend_from_slice(&prior.data()[b * c..(b + 1) * c]);
    }
    let keys_in = Tensor::new(vec![batch * keys, c], with_prior)?;

    let q = matmul_counted(&queries_in, &w.query, cost, FlopKind::Attention)?;
    let k = matmul_counted(&keys_in, &w.key, cost, FlopKind::Attention)?;
    let v = matmul_counted(&keys_in, &w.value, cost, FlopKind::Attention)?;

    let working = (q.len() + k.len() + v.len() + batch * n * c + n * keys) as u64;
    cost.allocate(working);

    let mut heads_out = vec![0.0; batch * n * c];
    let mut prior_weight = vec![0.0; batch * n];
    let mut scores = vec![0.0; n * keys];
    let mut exps = 0u64;
    for b in 0..batch {
        for h in 0..heads {
            let q_bh = MatRef {
                data: q.data(),
                offset: b * n * c + h * d,
                rows: n,
                cols: d,
                row_stride: c,
                col_stride: 1,
            };
            let k_bh = MatRef {
                data: k.data(),
                offset: b * keys * c + h * d,
                rows: keys,
                cols: d,
                row_stride: c,
                col_stride: 1,
            };
            let v_bh = MatRef {
                data: v.data(),
                offset: b * keys * c + h * d,
                rows: keys,
                cols: d,
                row_stride: c,
                col_stride: 1,
            };
            gemm(q_bh, k_bh.t(), &mut scores, 0, keys);
            for (i, row) in scores.chunks_mut(keys).enumerate() {
                for s in row.iter_mut() {
                    *s *= scale;
                }
                exps += softmax_row(row);
                prior_weight[b * n + i] += row[n];
            }
            gemm(
                MatRef::dense(&scores, n, keys),
                v_bh,
                &mut heads_out,
                b * n * c + h * d,
                c,
            );
        }
    }
    for p in prior_weight.iter_mut() {
        *p /= heads as f64;
    }
    let per_head = (batch * heads) as u64;
    cost.charge(
        FlopKind::Attention,
        per_head * (matmul_flops(n, d, keys) + matmul_flops(n, keys, d)) + exps,
    );

    let heads_out = Tensor::new(vec![batch * n, c], heads_out)?;
    let out = matmul_counted(&heads_out, &w.output, cost, FlopKind::Attention)?;
    cost.release(working);
    Ok((out.reshape(&[batch, n, c])?, Tensor::new(vec![batch, n], prior_weight)?))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Position-wise `down · gelu(up · x)` over the last axis.
pub fn ffn(x: &Tensor, w: &FfnWeights, cost: &mut CostCounters) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let c = *shape.last().unwrap();
    if w.up.shape() != [c, 2 * c] || w.down.shape() != [2 * c, c] {
        return Err(Error::dim(format!(
            "ffn weights {:?}/{:?} do not fit {c} channels",
            w.up.shape(),
            w.down.shape()
        )));
    }
    let rows = x.len() / c;
    let flat = Tensor::new(vec![rows, c], x.data().to_vec())?;
    let mut hidden = matmul_counted(&flat, &w.up, cost, FlopKind::Ffn)?;
    cost.allocate(hidden.len() as u64);
    for h in hidden.data_mut() {
        *h = gelu(*h);
    }
    let out = matmul_counted(&hidden, &w.down, cost, FlopKind::Ffn)?;
    cost.release(hidden.len() as u64);
    out.reshape(&shape)
}

/// `FFN(z + a)`, the block update shared by fresh, pruned and cached paths.
pub fn block_update(
    z: &LatentTensor,
    attention: &Tensor,
    w: &FfnWeights,
    cost: &mut CostCounters,
) -> Result<LatentTensor> {
    let sum = z.tensor().add(attention)?;
    LatentTensor::new(z.dims(), ffn(&sum, w, cost)?)
}

fn check_chain_inputs(z: &LatentTensor, heads: usize) -> Result<()> {
    z.dims().validate(heads)
}

/// Spatial block: attention over the `H·W` plane of each `(f, v)` image.
pub fn spatial_forward(
    z: &LatentTensor,
    k_s: &Tensor,
    w: &BlockWeights,
    cost: &mut CostCounters,
) -> Result<BlockOutput> {
    let dims = z.dims();
    check_chain_inputs(z, w.attention.heads)?;
    let LatentDims { frames: f, views: v, height: h, width: wd, channels: c } = dims;
    if k_s.shape() != [f, v, 1, c] {
        return Err(Error::dim(format!("k_s expects [{f},{v},1,{c}], got {:?}", k_s.shape())));
    }
    let seq = z.tensor().clone().reshape(&[f * v, h * wd, c])?;
    let prior = k_s.clone().reshape(&[f * v, 1, c])?;
    let (a, weight) = axis_attention(&seq, &prior, &w.attention, cost)?;
    let attention = a.reshape(&dims.shape())?;
    let semantic = SemanticMap {
        q_s: weight.reshape(&[f, v, h, wd])?,
    };
    let out = block_update(z, &attention, &w.ffn, cost)?;
    Ok(BlockOutput {
        out,
        attention,
        semantic: Some(semantic),
    })
}

/// Rearranges the latent into camera sequences `[F·H·W, V, C]`.
pub fn camera_sequences(z: &LatentTensor) -> Result<Tensor> {
    let LatentDims { frames: f, views: v, channels: c, .. } = z.dims();
    let p = z.dims().plane();
    z.tensor()
        .clone()
        .reshape(&[f, v, p, c])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[f * p, v, c])
}

/// Inverse of [`camera_sequences`].
pub fn from_camera_sequences(seq: Tensor, dims: LatentDims) -> Result<Tensor> {
    let LatentDims { frames: f, views: v, channels: c, .. } = dims;
    let p = dims.plane();
    seq.reshape(&[f, p, v, c])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&dims.shape())
}

/// Rearranges the latent into motion sequences `[V·H·W, F, C]`.
pub fn motion_sequences(z: &LatentTensor) -> Result<Tensor> {
    let LatentDims { frames: f, views: v, channels: c, .. } = z.dims();
    let p = z.dims().plane();
    z.tensor()
        .clone()
        .reshape(&[f, v, p, c])?
        .permute(&[1, 2, 0, 3])?
        .reshape(&[v * p, f, c])
}

/// Inverse of [`motion_sequences`].
pub fn from_motion_sequences(seq: Tensor, dims: LatentDims) -> Result<Tensor> {
    let LatentDims { frames: f, views: v, channels: c, .. } = dims;
    let p = dims.plane();
    seq.reshape(&[v, p, f, c])?
        .permute(&[2, 0, 1, 3])?
        .reshape(&dims.shape())
}

/// Camera block: attention across views for every `(f, h, w)`.
pub fn camera_forward(
    z: &LatentTensor,
    k_c: &Tensor,
    w: &BlockWeights,
    cost: &mut CostCounters,
) -> Result<BlockOutput> {
    let dims = z.dims();
    check_chain_inputs(z, w.attention.heads)?;
    let LatentDims { frames: f, height: h, width: wd, channels: c, .. } = dims;
    if k_c.shape() != [f, h, wd, c] {
        return Err(Error::dim(format!("k_c expects [{f},{h},{wd},{c}], got {:?}", k_c.shape())));
    }
    let seq = camera_sequences(z)?;
    let prior = k_c.clone().reshape(&[f * h * wd, 1, c])?;
    let (a, _) = axis_attention(&seq, &prior, &w.attention, cost)?;
    let attention = from_camera_sequences(a, dims)?;
    let out = block_update(z, &attention, &w.ffn, cost)?;
    Ok(BlockOutput {
        out,
        attention,
        semantic: None,
    })
}

/// Motion block: attention across frames for every `(v, h, w)`.
pub fn motion_forward(
    z: &LatentTensor,
    k_m: &Tensor,
    w: &BlockWeights,
    cost: &mut CostCounters,
) -> Result<BlockOutput> {
    let dims = z.dims();
    check_chain_inputs(z, w.attention.heads)?;
    let LatentDims { views: v, height: h, width: wd, channels: c, .. } = dims;
    if k_m.shape() != [v, h, wd, c] {
        return Err(Error::dim(format!("k_m expects [{v},{h},{wd},{c}], got {:?}", k_m.shape())));
    }
    let seq = motion_sequences(z)?;
    let prior = k_m.clone().reshape(&[v * h * wd, 1, c])?;
    let (a, _) = axis_attention(&seq, &prior, &w.attention, cost)?;
    let attention = from_motion_sequences(a, dims)?;
    let out = block_update(z, &attention, &w.ffn, cost)?;
    Ok(BlockOutput {
        out,
        attention,
        semantic: None,
    })
}

/// Dense spatial → camera → motion chain.
pub fn chain_forward(
    z: &LatentTensor,
    priors: &PriorSet,
    w: &ChainWeights,
    cost: &mut CostCounters,
) -> Result<ChainOutput> {
    priors.validate(z.dims())?;
    let spatial = spatial_forward(z, &priors.k_s, &w.spatial, cost)?;
    let camera = camera_forward(&spatial.out, &priors.k_c, &w.camera, cost)?;
    let motion = motion_forward(&camera.out, &priors.k_m, &w.motion, cost)?;
    Ok(ChainOutput {
        out: motion.out.clone(),
        spatial,
        camera,
        motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{randn, softmax_last};

    fn random_latent(dims: LatentDims, rng: &mut Rng) -> LatentTensor {
        LatentTensor::new(dims, randn(rng, &dims.shape()).unwrap()).unwrap()
    }

    fn random_priors(dims: LatentDims, rng: &mut Rng) -> PriorSet {
        let LatentDims { frames: f, views: v, height: h, width: w, channels: c } = dims;
        PriorSet {
            k_s: randn(rng, &[f, v, 1, c]).unwrap(),
            k_c: randn(rng, &[f, h, w, c]).unwrap(),
            k_m: randn(rng, &[v, h, w, c]).unwrap(),
        }
    }

    fn scalar_matvec(x: &[f64], m: &Tensor) -> Vec<f64> {
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        (0..cols)
            .map(|j| (0..rows).map(|i| x[i] * m.data()[i * cols + j]).sum())
            .collect()
    }

    /// Scalar transcription of prior-augmented multi-head attention for a
    /// single sequence.
    fn scalar_attention(tokens: &[Vec<f64>], prior: &[f64], w: &AttentionWeights) -> (Vec<Vec<f64>>, Vec<f64>) {
        let c = prior.len();
        let d = c / w.heads;
        let mut keys_in: Vec<Vec<f64>> = tokens.to_vec();
        keys_in.push(prior.to_vec());
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| scalar_matvec(t, &w.query)).collect();
        let k: Vec<Vec<f64>> = keys_in.iter().map(|t| scalar_matvec(t, &w.key)).collect();
        let v: Vec<Vec<f64>> = keys_in.iter().map(|t| scalar_matvec(t, &w.value)).collect();
        let mut outs = Vec::new();
        let mut pw = Vec::new();
        for qi in &q {
            let mut concat = vec![0.0; c];
            let mut prior_w = 0.0;
            for h in 0..w.heads {
                let sl = h * d..(h + 1) * d;
                let logits: Vec<f64> = k
                    .iter()
                    .map(|kj| qi[sl.clone()].iter().zip(&kj[sl.clone()]).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let s: f64 = e.iter().sum();
                let p: Vec<f64> = e.iter().map(|x| x / s).collect();
                prior_w += p[p.len() - 1];
                for (j, vj) in v.iter().enumerate() {
                    for (dd, idx) in sl.clone().enumerate() {
                        concat[h * d + dd] += p[j] * vj[idx];
                    }
                }
            }
            outs.push(scalar_matvec(&concat, &w.output));
            pw.push(prior_w / w.heads as f64);
        }
        (outs, pw)
    }

    fn scalar_ffn(x: &[f64], w: &FfnWeights) -> Vec<f64> {
        let hidden: Vec<f64> = scalar_matvec(x, &w.up).into_iter().map(gelu).collect();
        scalar_matvec(&hidden, &w.down)
    }

    fn at(t: &Tensor, dims: LatentDims, f: usize, v: usize, p: usize) -> Vec<f64> {
        let c = dims.channels;
        let base = ((f * dims.views + v) * dims.plane() + p) * c;
        t.data()[base..base + c].to_vec()
    }

    #[test]
    fn symmetric_single_token_splits_weight_evenly() {
        let w = AttentionWeights::identity(2, 1);
        let z = Tensor::new(vec![1, 1, 2], vec![0.3, -0.7]).unwrap();
        let prior = z.clone();
        let (_, pw) = axis_attention(&z, &prior, &w, &mut CostCounters::new()).unwrap();
        assert!((pw.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_value_projection_annihilates() {
        let mut rng = Rng::new(1);
        let mut w = AttentionWeights::uniform(4, 2, 0.5, &mut rng);
        w.value = Tensor::zeros(&[4, 4]);
        let z = randn(&mut rng, &[3, 5, 4]).unwrap();
        let prior = randn(&mut rng, &[3, 1, 4]).unwrap();
        let (out, _) = axis_attention(&z, &prior, &w, &mut CostCounters::new()).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn head_count_must_divide_channels() {
        let mut rng = Rng::new(1);
        let w = AttentionWeights::uniform(4, 3, 0.5, &mut rng);
        let z = randn(&mut rng, &[1, 2, 4]).unwrap();
        let prior = randn(&mut rng, &[1, 1, 4]).unwrap();
        assert!(matches!(
            axis_attention(&z, &prior, &w, &mut CostCounters::new()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hand_built_attention_matches_scalar_oracle() {
        let w = AttentionWeights {
            query: Tensor::new(vec![2, 2], vec![0.5, -0.25, 1.0, 0.75]).unwrap(),
            key: Tensor::new(vec![2, 2], vec![1.5, 0.0, -0.5, 1.0]).unwrap(),
            value: Tensor::new(vec![2, 2], vec![0.2, 0.4, -0.6, 0.8]).unwrap(),
            output: Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
            heads: 1,
        };
        let tokens = vec![vec![1.0, 2.0], vec![-0.5, 0.25]];
        let prior = vec![0.75, -1.25];
        let z = Tensor::new(vec![1, 2, 2], tokens.concat()).unwrap();
        let p = Tensor::new(vec![1, 1, 2], prior.clone()).unwrap();
        let (out, pw) = axis_attention(&z, &p, &w, &mut CostCounters::new()).unwrap();
        let (want, want_pw) = scalar_attention(&tokens, &prior, &w);
        for i in 0..2 {
            for j in 0..2 {
                assert!((out.data()[i * 2 + j] - want[i][j]).abs() < 1e-12);
            }
            assert!((pw.data()[i] - want_pw[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        // Recover per-query weights with a one-hot value trick: value = I,
        // output = I, one head, so row i of the output is sum_j p_ij v_j.
        let mut rng = Rng::new(8);
        let c = 4;
        let z = randn(&mut rng, &[2, 3, c]).unwrap();
        let prior = randn(&mut rng, &[2, 1, c]).unwrap();
        let mut w = AttentionWeights::uniform(c, 1, 0.8, &mut rng);
        w.value = identity_matrix(c);
        w.output = identity_matrix(c);
        let (_, pw) = axis_attention(&z, &prior, &w, &mut CostCounters::new()).unwrap();
        assert!(pw.data().iter().all(|&p| p > 0.0 && p < 1.0));
        // full distribution check through the scalar oracle
        for b in 0..2 {
            let tokens: Vec<Vec<f64>> = (0..3).map(|i| z.data()[(b * 3 + i) * c..(b * 3 + i + 1) * c].to_vec()).collect();
            let q: Vec<Vec<f64>> = tokens.iter().map(|t| scalar_matvec(t, &w.query)).collect();
            let mut all = tokens.clone();
            all.push(prior.data()[b * c..(b + 1) * c].to_vec());
            let k: Vec<Vec<f64>> = all.iter().map(|t| scalar_matvec(t, &w.key)).collect();
            for qi in &q {
                let logits: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / 2.0).collect();
                let p = softmax_last(&Tensor::new(vec![4], logits).unwrap());
                assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn value_scaling_is_linear() {
        let mut rng = Rng::new(12);
        let w = AttentionWeights::uniform(4, 2, 0.6, &mut rng);
        let z = randn(&mut rng, &[2, 5, 4]).unwrap();
        let prior = randn(&mut rng, &[2, 1, 4]).unwrap();
        let (base, _) = axis_attention(&z, &prior, &w, &mut CostCounters::new()).unwrap();
        let mut scaled = w.clone();
        scaled.value = w.value.scale(2.0);
        let (out, _) = axis_attention(&z, &prior, &scaled, &mut CostCounters::new()).unwrap();
        assert!(out.max_abs_diff(&base.scale(2.0)).unwrap() == 0.0);
    }

    #[test]
    fn gelu_limits() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-6);
    }

    #[test]
    fn ffn_zero_weights_and_oracle() {
        let mut rng = Rng::new(3);
        let x = randn(&mut rng, &[2, 3, 4]).unwrap();
        let out = ffn(&x, &FfnWeights::zeros(4), &mut CostCounters::new()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let w = FfnWeights::uniform(4, 0.5, &mut rng);
        let out = ffn(&x, &w, &mut CostCounters::new()).unwrap();
        for r in 0..6 {
            let want = scalar_ffn(&x.data()[r * 4..(r + 1) * 4], &w);
            for j in 0..4 {
                assert!((out.data()[r * 4 + j] - want[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn spatial_matches_transcription() {
        let dims = LatentDims::new(1, 1, 2, 2, 2);
        let mut rng = Rng::new(31);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = BlockWeights::uniform(2, 1, 0.9, &mut rng);
        let got = spatial_forward(&z, &priors.k_s, &w, &mut CostCounters::new()).unwrap();
        let tokens: Vec<Vec<f64>> = (0..4).map(|p| at(z.tensor(), dims, 0, 0, p)).collect();
        let (attn, pw) = scalar_attention(&tokens, priors.k_s.data(), &w.attention);
        for p in 0..4 {
            let sum: Vec<f64> = tokens[p].iter().zip(&attn[p]).map(|(a, b)| a + b).collect();
            let want = scalar_ffn(&sum, &w.ffn);
            let have = at(got.out.tensor(), dims, 0, 0, p);
            for j in 0..2 {
                assert!((have[j] - want[j]).abs() < 1e-12);
                assert!((at(&got.attention, dims, 0, 0, p)[j] - attn[p][j]).abs() < 1e-12);
            }
            assert!((got.semantic.as_ref().unwrap().q_s.data()[p] - pw[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_single_pixel_semantic_in_unit_interval() {
        let dims = LatentDims::new(2, 3, 1, 1, 4);
        let mut rng = Rng::new(4);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = BlockWeights::uniform(4, 2, 0.5, &mut rng);
        let out = spatial_forward(&z, &priors.k_s, &w, &mut CostCounters::new()).unwrap();
        let q = out.semantic.unwrap().q_s;
        assert_eq!(q.shape(), &[2, 3, 1, 1]);
        assert!(q.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn camera_and_motion_match_transcription() {
        let dims = LatentDims::new(2, 3, 1, 2, 2);
        let mut rng = Rng::new(32);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = BlockWeights::uniform(2, 2, 0.9, &mut rng);
        let cam = camera_forward(&z, &priors.k_c, &w, &mut CostCounters::new()).unwrap();
        for f in 0..2 {
            for p in 0..2 {
                let tokens: Vec<Vec<f64>> = (0..3).map(|v| at(z.tensor(), dims, f, v, p)).collect();
                let prior = &priors.k_c.data()[(f * 2 + p) * 2..(f * 2 + p + 1) * 2];
                let (attn, _) = scalar_attention(&tokens, prior, &w.attention);
                for v in 0..3 {
                    let sum: Vec<f64> = tokens[v].iter().zip(&attn[v]).map(|(a, b)| a + b).collect();
                    let want = scalar_ffn(&sum, &w.ffn);
                    let have = at(cam.out.tensor(), dims, f, v, p);
                    for j in 0..2 {
                        assert!((have[j] - want[j]).abs() < 1e-12);
                    }
                }
            }
        }
        let mot = motion_forward(&z, &priors.k_m, &w, &mut CostCounters::new()).unwrap();
        for v in 0..3 {
            for p in 0..2 {
                let tokens: Vec<Vec<f64>> = (0..2).map(|f| at(z.tensor(), dims, f, v, p)).collect();
                let prior = &priors.k_m.data()[(v * 2 + p) * 2..(v * 2 + p + 1) * 2];
                let (attn, _) = scalar_attention(&tokens, prior, &w.attention);
                for f in 0..2 {
                    let sum: Vec<f64> = tokens[f].iter().zip(&attn[f]).map(|(a, b)| a + b).collect();
                    let want = scalar_ffn(&sum, &w.ffn);
                    let have = at(mot.out.tensor(), dims, f, v, p);
                    for j in 0..2 {
                        assert!((have[j] - want[j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_axes_are_finite_and_deterministic() {
        let dims = LatentDims::new(1, 1, 2, 2, 4);
        let mut rng = Rng::new(5);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = ChainWeights::uniform(4, 2, 0.5, &mut rng);
        let a = chain_forward(&z, &priors, &w, &mut CostCounters::new()).unwrap();
        let b = chain_forward(&z, &priors, &w, &mut CostCounters::new()).unwrap();
        assert!(a.out.tensor().is_finite());
        assert_eq!(a, b);
    }

    fn permute_axis(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
        let parts: Vec<Tensor> = (0..t.shape()[axis])
            .map(|i| {
                let moved = if axis == 0 { t.clone() } else { t.permute(&[1, 0, 2, 3, 4]).unwrap() };
                moved.index_first(perm[i]).unwrap()
            })
            .collect();
        let stacked = Tensor::stack(&parts).unwrap();
        if axis == 0 { stacked } else { stacked.permute(&[1, 0, 2, 3, 4]).unwrap() }
    }

    #[test]
    fn camera_is_view_equivariant() {
        let dims = LatentDims::new(2, 3, 2, 2, 4);
        let mut rng = Rng::new(40);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = BlockWeights::uniform(4, 2, 0.7, &mut rng);
        let perm = [2, 0, 1];
        let zp = LatentTensor::new(dims, permute_axis(z.tensor(), 1, &perm)).unwrap();
        let base = camera_forward(&z, &priors.k_c, &w, &mut CostCounters::new()).unwrap();
        let moved = camera_forward(&zp, &priors.k_c, &w, &mut CostCounters::new()).unwrap();
        let want = permute_axis(base.out.tensor(), 1, &perm);
        assert!(moved.out.tensor().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn motion_is_frame_equivariant() {
        let dims = LatentDims::new(3, 2, 2, 2, 4);
        let mut rng = Rng::new(41);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = BlockWeights::uniform(4, 2, 0.7, &mut rng);
        let perm = [1, 2, 0];
        let zp = LatentTensor::new(dims, permute_axis(z.tensor(), 0, &perm)).unwrap();
        let base = motion_forward(&z, &priors.k_m, &w, &mut CostCounters::new()).unwrap();
        let moved = motion_forward(&zp, &priors.k_m, &w, &mut CostCounters::new()).unwrap();
        let want = permute_axis(base.out.tensor(), 0, &perm);
        assert!(moved.out.tensor().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn zero_weights_zero_chain() {
        let dims = LatentDims::new(2, 2, 2, 2, 4);
        let mut rng = Rng::new(6);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = ChainWeights::uniform(4, 2, 0.0, &mut rng);
        let out = chain_forward(&z, &priors, &w, &mut CostCounters::new()).unwrap();
        assert!(out.out.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn chain_is_three_block_composition() {
        let dims = LatentDims::new(2, 2, 2, 2, 4);
        let mut rng = Rng::new(7);
        let z = random_latent(dims, &mut rng);
        let priors = random_priors(dims, &mut rng);
        let w = ChainWeights::uniform(4, 2, 0.5, &mut rng);
        let mut cost = CostCounters::new();
        let chain = chain_forward(&z, &priors, &w, &mut cost).unwrap();
        let s = spatial_forward(&z, &priors.k_s, &w.spatial, &mut cost).unwrap();
        let c = camera_forward(&s.out, &priors.k_c, &w.camera, &mut cost).unwrap();
        let m = motion_forward(&c.out, &priors.k_m, &w.motion, &mut cost).unwrap();
        assert_eq!(chain.out, m.out);
    }
}

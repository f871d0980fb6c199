//! Point-wise cross-layer attention. A target feature map queries pooled,
//! resolution-matched versions of every hierarchy level (itself included),
//! mixes their embeddings per point, and adds the result back through a
//! zero-initialized projection, so an untrained block is an exact identity.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tape::{Tape, ValueId};
use crate::tensor::{Scalar, Tensor};

/// How reference similarities become fusion weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrelationKind {
    /// Softmax over the level axis at each point.
    EmbeddedGaussian,
    /// Independent logistic gate per level.
    Sigmoid,
    /// Raw logits divided by the number of levels, used directly.
    DotProduct,
}

impl CorrelationKind {
    pub const ALL: [CorrelationKind; 3] =
        [CorrelationKind::EmbeddedGaussian, CorrelationKind::Sigmoid, CorrelationKind::DotProduct];

    pub fn name(self) -> &'static str {
        match self {
            CorrelationKind::EmbeddedGaussian => "gaussian",
            CorrelationKind::Sigmoid => "sigmoid",
            CorrelationKind::DotProduct => "dot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(CorrelationKind::EmbeddedGaussian),
            "sigmoid" => Ok(CorrelationKind::Sigmoid),
            "dot" => Ok(CorrelationKind::DotProduct),
            other => Err(CoreError::invalid(
                "correlation",
                format!("unknown kind {other:?}, expected gaussian | sigmoid | dot"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossFusionConfig {
    pub correlation: CorrelationKind,
    pub pool_kernel: usize,
    pub pool_dilation: usize,
    /// Embedding width as a fraction of the target channel count.
    pub embed_ratio: (u32, u32),
}

impl Default for CrossFusionConfig {
    fn default() -> Self {
        CrossFusionConfig {
            correlation: CorrelationKind::EmbeddedGaussian,
            pool_kernel: 5,
            pool_dilation: 3,
            embed_ratio: (1, 2),
        }
    }
}

impl CrossFusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pool_kernel % 2 == 0 || self.pool_kernel < 1 {
            return Err(CoreError::invalid(
                "CrossFusionConfig",
                format!("pool_kernel must be odd and >= 1, got {}", self.pool_kernel),
            ));
        }
        if self.pool_dilation < 1 {
            return Err(CoreError::invalid(
                "CrossFusionConfig",
                format!("pool_dilation must be >= 1, got {}", self.pool_dilation),
            ));
        }
        if self.embed_ratio.0 == 0 || self.embed_ratio.1 == 0 {
            return Err(CoreError::invalid(
                "CrossFusionConfig",
                format!("embed_ratio {:?} must have positive terms", self.embed_ratio),
            ));
        }
        Ok(())
    }

    /// floor(c_p * ratio), clamped to >= 1 for tiny channel counts.
    pub fn embed_channels(&self, c_p: usize) -> usize {
        (c_p * self.embed_ratio.0 as usize / self.embed_ratio.1 as usize).max(1)
    }
}

/// Tape-resident feature maps from one backbone pass plus the index of the
/// map being refined.
#[derive(Clone, Debug)]
pub struct FeatureHierarchy {
    pub maps: Vec<ValueId>,
    pub target_index: usize,
}

impl FeatureHierarchy {
    pub fn validate<T: Scalar>(&self, tape: &Tape<T>) -> Result<()> {
        if self.maps.is_empty() {
            return Err(CoreError::invalid("FeatureHierarchy", "hierarchy has no maps"));
        }
        if self.target_index >= self.maps.len() {
            return Err(CoreError::invalid(
                "FeatureHierarchy",
                format!(
                    "target index {} out of range for {} maps",
                    self.target_index,
                    self.maps.len()
                ),
            ));
        }
        for &m in &self.maps {
            if tape.value(m).rank() != 3 {
                return Err(CoreError::invalid(
                    "FeatureHierarchy",
                    format!("maps must be [C,H,W], got shape {:?}", tape.value(m).dims()),
                ));
            }
        }
        Ok(())
    }
}

/// Host-side block weights. `w_theta` embeds the target (query), one `w_phi`
/// per hierarchy level embeds its pooled reference (shared key/value), and
/// `w_alpha` projects the fused embedding back onto the target channels.
#[derive(Clone, Debug)]
pub struct BlockParams<T: Scalar> {
    pub w_theta: Tensor<T>,
    pub w_phi: Vec<Tensor<T>>,
    pub w_alpha: Tensor<T>,
}

impl<T: Scalar> BlockParams<T> {
    /// Gaussian(0, 0.01) for the embeddings, exact zeros for `w_alpha`, so
    /// the block starts as an identity mapping.
    pub fn init<R: Rng>(
        c_p: usize,
        ref_channels: &[usize],
        cfg: &CrossFusionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if ref_channels.is_empty() {
            return Err(CoreError::invalid("BlockParams::init", "no reference channels"));
        }
        let c_e = cfg.embed_channels(c_p);
        let normal = Normal::new(0.0, 0.01).expect("valid stddev");
        let mut gauss = |dims: Vec<usize>| -> Tensor<T> {
            let n = dims.iter().product();
            let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
            Tensor::new(dims, data).expect("init shape").with_grad()
        };
        Ok(BlockParams {
            w_theta: gauss(vec![c_e, c_p]),
            w_phi: ref_channels.iter().map(|&c_j| gauss(vec![c_e, c_j])).collect(),
            w_alpha: Tensor::zeros(vec![c_p, c_e]).with_grad(),
        })
    }

    pub fn embed_channels(&self) -> usize {
        self.w_theta.dims()[0]
    }

    /// Flat views in a fixed order: theta, each phi, alpha. The same order
    /// everywhere (optimizer, serialization, tape leafing).
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.w_theta];
        v.extend(self.w_phi.iter());
        v.push(&self.w_alpha);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.w_theta];
        v.extend(self.w_phi.iter_mut());
        v.push(&mut self.w_alpha);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Push all weights onto a tape; gradient participation follows each
    /// tensor's requires_grad flag.
    pub fn leaf_into(&self, tape: &mut Tape<T>) -> BlockParamIds {
        BlockParamIds {
            w_theta: tape.leaf(self.w_theta.clone()),
            w_phi: self.w_phi.iter().map(|t| tape.leaf(t.clone())).collect(),
            w_alpha: tape.leaf(self.w_alpha.clone()),
        }
    }
}

/// Tape handles for one step's copy of the block weights, in the same order
/// as [`BlockParams::tensors`].
#[derive(Clone, Debug)]
pub struct BlockParamIds {
    pub w_theta: ValueId,
    pub w_phi: Vec<ValueId>,
    pub w_alpha: ValueId,
}

impl BlockParamIds {
    pub fn all(&self) -> Vec<ValueId> {
        let mut v = vec![self.w_theta];
        v.extend(self.w_phi.iter().copied());
        v.push(self.w_alpha);
        v
    }
}

/// Closed-form parameter count: query embedding + per-level key embeddings
/// + output projection, bias-free throughout.
pub fn block_param_count(c_p: usize, c_e: usize, ref_channels: &[usize]) -> usize {
    c_e * c_p + ref_channels.iter().map(|&c_j| c_e * c_j).sum::<usize>() + c_p * c_e
}

/// Multiply-accumulate estimate for one block forward at target resolution
/// (h_p, w_p): embeddings, correlation, fusion, pooling comparisons, and
/// resize interpolation arithmetic.
pub fn block_flops(
    map_dims: &[(usize, usize, usize)],
    target_index: usize,
    cfg: &CrossFusionConfig,
) -> u64 {
    let (c_p, h_p, w_p) = map_dims[target_index];
    let c_e = cfg.embed_channels(c_p);
    let px = (h_p * w_p) as u64;
    let n = map_dims.len() as u64;
    let mut flops = 0u64;
    // Query, key and output embeddings.
    flops += (c_e * c_p) as u64 * px;
    for &(c_j, _, _) in map_dims {
        flops += (c_e * c_j) as u64 * px;
    }
    flops += (c_p * c_e) as u64 * px;
    // Correlation logits and weighted aggregation.
    flops += n * c_e as u64 * px * 2;
    // Pooling: one comparison per visited tap beyond the first.
    let half = (cfg.pool_kernel as isize - 1) / 2;
    let valid = |i: usize, len: usize| -> u64 {
        (-half..=half)
            .filter(|a| {
                let t = i as isize + a * cfg.pool_dilation as isize;
                t >= 0 && t < len as isize
            })
            .count() as u64
    };
    for &(c_j, _, _) in map_dims {
        let mut taps = 0u64;
        for y in 0..h_p {
            for x in 0..w_p {
                taps += valid(y, h_p) * valid(x, w_p) - 1;
            }
        }
        flops += c_j as u64 * taps;
    }
    // Resize: ~9 ops per produced value (three lerps); identity resizes are
    // free.
    for &(c_j, h_j, w_j) in map_dims {
        if (h_j, w_j) != (h_p, w_p) {
            flops += 9 * c_j as u64 * px;
        }
    }
    flops
}

/// Resize every hierarchy level to the target resolution, then apply the
/// dilated max pool. The target map itself is included.
pub fn assemble_references<T: Scalar>(
    tape: &mut Tape<T>,
    h: &FeatureHierarchy,
    cfg: &CrossFusionConfig,
) -> Result<Vec<ValueId>> {
    h.validate(tape)?;
    cfg.validate()?;
    let td = tape.value(h.maps[h.target_index]).dims();
    let (h_p, w_p) = (td[1], td[2]);
    h.maps
        .iter()
        .map(|&m| {
            let resized = tape.resize_bilinear(m, h_p, w_p)?;
            tape.dilated_max_pool(resized, cfg.pool_kernel, cfg.pool_dilation)
        })
        .collect()
}

/// Per-point similarity of the query embedding against each key embedding,
/// turned into fusion weights [N, H, W] by the chosen correlation kind.
pub fn correlate<T: Scalar>(
    tape: &mut Tape<T>,
    query_emb: ValueId,
    key_embs: &[ValueId],
    kind: CorrelationKind,
) -> Result<ValueId> {
    if key_embs.is_empty() {
        return Err(CoreError::invalid("correlate", "empty key embedding list"));
    }
    let logits: Vec<ValueId> =
        key_embs.iter().map(|&k| tape.pointwise_dot(query_emb, k)).collect::<Result<_>>()?;
    let stacked = tape.stack0(&logits)?;
    match kind {
        CorrelationKind::EmbeddedGaussian => tape.softmax_axis(stacked, 0),
        CorrelationKind::Sigmoid => Ok(tape.sigmoid(stacked)),
        CorrelationKind::DotProduct => {
            Ok(tape.scale(stacked, T::from_f64(1.0 / key_embs.len() as f64)))
        }
    }
}

/// y[c,h,w] = sum_j weights[j,h,w] * key_embs[j][c,h,w].
pub fn fuse<T: Scalar>(
    tape: &mut Tape<T>,
    weights: ValueId,
    key_embs: &[ValueId],
) -> Result<ValueId> {
    let wd = tape.value(weights).dims().to_vec();
    if wd.len() != 3 || wd[0] != key_embs.len() {
        return Err(CoreError::ShapeMismatch { op: "fuse", left: wd, right: vec![key_embs.len()] });
    }
    let mut acc: Option<ValueId> = None;
    for (j, &k) in key_embs.iter().enumerate() {
        let wj = tape.slice0(weights, j)?;
        let term = tape.scale_map(k, wj)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("key_embs nonempty"))
}

/// Baseline fusion: each reference projected to the target channel count by
/// a 1x1 conv, then summed with the target. References are assembled exactly
/// as in cross-fusion, and zero projections reproduce the identity, so the
/// comparison isolates the attention itself.
pub fn fuse_addition<T: Scalar>(
    tape: &mut Tape<T>,
    h: &FeatureHierarchy,
    projs: &[ValueId],
    cfg: &CrossFusionConfig,
) -> Result<ValueId> {
    if projs.len() != h.maps.len() {
        return Err(CoreError::invalid(
            "fuse_addition",
            format!("{} projections for {} hierarchy levels", projs.len(), h.maps.len()),
        ));
    }
    let refs = assemble_references(tape, h, cfg)?;
    let mut acc = h.maps[h.target_index];
    for (&r, &p) in refs.iter().zip(projs) {
        let t = tape.conv1x1(r, p)?;
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Baseline fusion: references concatenated along channels, projected back
/// to the target channel count by one 1x1 conv, and added to the target.
pub fn fuse_concat<T: Scalar>(
    tape: &mut Tape<T>,
    h: &FeatureHierarchy,
    proj: ValueId,
    cfg: &CrossFusionConfig,
) -> Result<ValueId> {
    let refs = assemble_references(tape, h, cfg)?;
    let cat = tape.concat0(&refs)?;
    let t = tape.conv1x1(cat, proj)?;
    tape.add(h.maps[h.target_index], t)
}

fn check_embedding<T: Scalar>(
    tape: &Tape<T>,
    level: usize,
    w: ValueId,
    c_e: usize,
    feature_channels: usize,
) -> Result<()> {
    let wd = tape.value(w).dims();
    if wd.len() != 2 || wd[0] != c_e {
        return Err(CoreError::invalid(
            "cross_fusion_forward",
            format!(
                "embedding at level {level} has shape {wd:?}, expected [{c_e}, {feature_channels}]"
            ),
        ));
    }
    if wd[1] != feature_channels {
        return Err(CoreError::ChannelMismatch {
            level,
            expected: wd[1],
            actual: feature_channels,
        });
    }
    Ok(())
}

/// Full block: assemble references, embed, correlate, fuse, project through
/// the zero-initialized output embedding, and add the residual.
pub fn cross_fusion_forward<T: Scalar>(
    tape: &mut Tape<T>,
    h: &FeatureHierarchy,
    params: &BlockParamIds,
    cfg: &CrossFusionConfig,
) -> Result<ValueId> {
    h.validate(tape)?;
    cfg.validate()?;
    let x_p = h.maps[h.target_index];
    let c_p = tape.value(x_p).dims()[0];
    let c_e = tape.value(params.w_theta).dims()[0];
    if params.w_phi.len() != h.maps.len() {
        return Err(CoreError::invalid(
            "cross_fusion_forward",
            format!("{} key embeddings for {} hierarchy levels", params.w_phi.len(), h.maps.len()),
        ));
    }
    check_embedding(tape, h.target_index, params.w_theta, c_e, c_p)?;
    for (j, (&w, &m)) in params.w_phi.iter().zip(&h.maps).enumerate() {
        check_embedding(tape, j, w, c_e, tape.value(m).dims()[0])?;
    }
    let ad = tape.value(params.w_alpha).dims();
    if ad != [c_p, c_e] {
        return Err(CoreError::ShapeMismatch {
            op: "cross_fusion_forward",
            left: ad.to_vec(),
            right: vec![c_p, c_e],
        });
    }

    let refs = assemble_references(tape, h, cfg)?;
    let query = tape.conv1x1(x_p, params.w_theta)?;
    let keys: Vec<ValueId> =
        refs.iter().zip(&params.w_phi).map(|(&r, &w)| tape.conv1x1(r, w)).collect::<Result<_>>()?;
    let weights = correlate(tape, query, &keys, cfg.correlation)?;
    let fused = fuse(tape, weights, &keys)?;
    let projected = tape.conv1x1(fused, params.w_alpha)?;
    tape.add(projected, x_p)
}

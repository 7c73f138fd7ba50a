//! Masked audio model: block-wise time masking, a context transformer with
//! relative position bias, a linear predictor, and the self-supervised
//! objectives that score predictions against fixed prototype vectors.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig, TRANSFORMER_PREFIX};
use crate::error::{Error, Result};
use crate::numgrad::nn::{uniform, LayerNorm, Linear, TransformerBlock};
use crate::numgrad::{bce_scalar, sigmoid, AdamW, AdamWConfig, Array, Graph, ParamId, ParamStore, Var, COSINE_EPS, LEAKY_SLOPE};
use crate::proto::PseudoLabelMatrix;
use crate::rng::{substream, Rng};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    frames: usize,
    indices: Vec<usize>,
    blocks: Vec<(usize, usize)>,
}

impl MaskSpec {
    pub fn from_indices(frames: usize, mut indices: Vec<usize>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.last().is_some_and(|&i| i >= frames) {
            return Err(Error::Contract(format!("mask index out of range for {frames} frames")));
        }
        let blocks = indices.iter().map(|&i| (i, i + 1)).collect();
        Ok(Self {
            frames,
            indices,
            blocks,
        })
    }

    pub fn none(frames: usize) -> Self {
        Self {
            frames,
            indices: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn all(frames: usize) -> Self {
        Self {
            frames,
            indices: (0..frames).collect(),
            blocks: vec![(0, frames)],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Sorted masked frame indices.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Sampled half-open intervals whose union is the mask.
    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn count(&self) -> usize {
        self.indices.len()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.frames as f64
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.frames];
        self.indices.iter().for_each(|&i| f[i] = true);
        f
    }
}

/// Adds uniformly placed intervals `[s, min(s + block, T))` until at least
/// `⌈ratio · T⌉` frames are covered.
pub fn sample_block_mask(rng: &mut Rng, frames: usize, ratio: f64, block: usize) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Parameter(format!("mask ratio {ratio} outside (0, 1]")));
    }
    if block == 0 || block > frames {
        return Err(Error::Parameter(format!("mask block {block} outside [1, {frames}]")));
    }
    let target = ((ratio * frames as f64).ceil() as usize).min(frames);
    let mut flags = vec![false; frames];
    let mut covered = 0;
    let mut blocks = Vec::new();
    while covered < target {
        let s = rng.random_range(0..frames);
        let e = (s + block).min(frames);
        for f in &mut flags[s..e] {
            if !*f {
                *f = true;
                covered += 1;
            }
        }
        blocks.push((s, e));
    }
    let indices = (0..frames).filter(|&t| flags[t]).collect();
    Ok(MaskSpec {
        frames,
        indices,
        blocks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub enabled: bool,
    pub ratio: f64,
    pub block: usize,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            ratio: 0.75,
            block: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "bce")]
    PrototypeBce,
    #[serde(rename = "infonce")]
    InfoNce,
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(Self::PrototypeBce),
            "infonce" => Ok(Self::InfoNce),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamLossConfig {
    pub tau: f64,
    pub leaky_slope: f64,
    pub loss_kind: LossKind,
}

impl Default for MamLossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            leaky_slope: LEAKY_SLOPE,
            loss_kind: LossKind::PrototypeBce,
        }
    }
}

impl MamLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky slope must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContextConfig {
    pub blocks: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Relative distances beyond this share one bias entry.
    pub max_distance: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            heads: 2,
            ff_hidden: 64,
            max_distance: 32,
        }
    }
}

/// Mask token, transformer blocks with per-head relative position bias, and
/// a final layer norm.
#[derive(Clone, Debug)]
pub struct ContextNetwork {
    pub mask_token: ParamId,
    blocks: Vec<TransformerBlock>,
    rel_bias: Vec<Vec<ParamId>>,
    norm: LayerNorm,
}

impl ContextNetwork {
    pub fn new(store: &mut ParamStore, dim: usize, cfg: &ContextConfig, rng: &mut Rng) -> Result<Self> {
        let width = 2 * cfg.max_distance + 1;
        let mask_token = store.add("context.mask_token", uniform(1, dim, 0.5, rng))?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        let mut rel_bias = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let name = format!("context.block{b}");
            blocks.push(TransformerBlock::new(store, &name, dim, cfg.heads, cfg.ff_hidden, rng)?);
            rel_bias.push(
                (0..cfg.heads)
                    .map(|h| store.add(format!("{name}.rel_bias{h}"), Array::zeros(&[1, width])))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let norm = LayerNorm::new(store, "context.norm", dim)?;
        Ok(Self {
            mask_token,
            blocks,
            rel_bias,
            norm,
        })
    }

    /// Replaces masked rows of `latent` with the mask token.
    pub fn apply_mask(&self, g: &mut Graph, store: &ParamStore, latent: Var, mask: &MaskSpec) -> Result<Var> {
        if g.value(latent).rows() != mask.frames() {
            return Err(Error::Contract(format!(
                "mask over {} frames applied to {} rows",
                mask.frames(),
                g.value(latent).rows()
            )));
        }
        if mask.count() == 0 {
            return Ok(latent);
        }
        let token = g.param(store, self.mask_token);
        g.mask_rows(latent, token, &mask.flags())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let len = g.value(x).rows();
        let mut x = x;
        for (block, tables) in self.blocks.iter().zip(&self.rel_bias) {
            let bias = tables
                .iter()
                .map(|&t| {
                    let t = g.param(store, t);
                    g.relative_position_bias(t, len)
                })
                .collect::<Result<Vec<_>>>()?;
            x = block.forward(g, store, x, Some(&bias))?;
        }
        self.norm.forward(g, store, x)
    }
}

/// Encoder, context network and linear predictor trained by the M-step.
#[derive(Clone, Debug)]
pub struct MaskedModel {
    pub encoder: Encoder,
    pub context: ContextNetwork,
    pub predictor: Linear,
}

impl MaskedModel {
    /// Parameters are created in a fixed order from named init substreams
    /// so a fine-tuning model built from the same seed has identical names.
    pub fn new(store: &mut ParamStore, enc: &EncoderConfig, ctx: &ContextConfig, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "init", &[0]);
        let encoder = Encoder::new(store, enc, &mut rng)?;
        let mut rng = substream(seed, "init", &[1]);
        let context = ContextNetwork::new(store, enc.embed_dim, ctx, &mut rng)?;
        let mut rng = substream(seed, "init", &[2]);
        let predictor = Linear::new(store, "predictor", enc.embed_dim, enc.embed_dim, true, &mut rng)?;
        Ok(Self {
            encoder,
            context,
            predictor,
        })
    }

    /// Predictions for every frame, `T × D`; `mask` selects frames replaced
    /// by the mask token before the context network.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, features: &Array, mask: Option<&MaskSpec>) -> Result<Var> {
        let z = self.encoder.encode(g, store, features)?;
        let x = match mask {
            Some(m) => self.context.apply_mask(g, store, z, m)?,
            None => z,
        };
        let c = self.context.forward(g, store, x)?;
        self.predictor.forward(g, store, c)
    }
}

/// Per-(frame, prototype) loss terms on the rows of `preds` listed in
/// `frames`: `|frames| × K` for the prototype BCE, `|frames| × 1` for InfoNCE.
pub fn loss_terms(
    g: &mut Graph,
    preds: Var,
    means: &Array,
    gamma: &PseudoLabelMatrix,
    frames: &[usize],
    cfg: &MamLossConfig,
) -> Result<Var> {
    if frames.is_empty() {
        return Err(Error::Contract("masked objective over zero frames".into()));
    }
    if gamma.frames() != g.value(preds).rows() || gamma.components() != means.rows() {
        return Err(Error::Dimension {
            op: "masked loss",
            left: vec![g.value(preds).rows(), means.rows()],
            right: gamma.gamma.shape().to_vec(),
        });
    }
    let c = g.gather_rows(preds, frames)?;
    let mu = g.constant(means.clone());
    let sims = g.cosine_similarity(c, mu)?;
    let targets = gamma.gamma.select_rows(frames);
    match cfg.loss_kind {
        LossKind::PrototypeBce => {
            let r = g.leaky_relu(sims, cfg.leaky_slope)?;
            let logits = g.scale(r, 2.0 / cfg.tau);
            let logits = g.add_scalar(logits, -1.0 / cfg.tau);
            let p = g.sigmoid(logits);
            g.bce(p, targets)
        }
        LossKind::InfoNce => {
            let logp = g.log_softmax(sims, cfg.tau)?;
            let positives = PseudoLabelMatrix { gamma: targets }.argmax();
            let mut onehot = Array::zeros(&[frames.len(), means.rows()]);
            for (t, &k) in positives.iter().enumerate() {
                onehot.set(t, k, -1.0);
            }
            let sel = g.constant(onehot);
            let picked = g.mul(logp, sel)?;
            let ones = g.constant(Array::ones(&[means.rows(), 1]));
            g.matmul(picked, ones)
        }
    }
}

/// Number of loss terms a frame contributes under `kind`.
pub fn terms_per_frame(kind: LossKind, k: usize) -> usize {
    match kind {
        LossKind::PrototypeBce => k,
        LossKind::InfoNce => 1,
    }
}

/// Direct evaluation of one prototype-wise BCE term.
pub fn prototype_bce_term(pred: &[f64], mean: &[f64], gamma: f64, cfg: &MamLossConfig) -> f64 {
    let dot: f64 = pred.iter().zip(mean).map(|(a, b)| a * b).sum();
    let na = pred.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = mean.iter().map(|b| b * b).sum::<f64>().sqrt();
    let sim = dot / (na * nb + COSINE_EPS);
    bce_scalar(prototype_probability(sim, cfg), gamma)
}

/// `σ((2·leaky(sim) − 1) / τ)`.
pub fn prototype_probability(sim: f64, cfg: &MamLossConfig) -> f64 {
    let r = if sim >= 0.0 { sim } else { cfg.leaky_slope * sim };
    sigmoid((2.0 * r - 1.0) / cfg.tau)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the encoder's transformer branch.
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub adamw: AdamWConfig,
    pub mask: MaskConfig,
    pub loss: MamLossConfig,
    /// When false the convolutional branch is held fixed.
    pub train_cnn: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            lr_backbone: 1e-3,
            lr_rest: 1e-3,
            adamw: AdamWConfig::default(),
            mask: MaskConfig::default(),
            loss: MamLossConfig::default(),
            train_cnn: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_backbone > 0.0 && self.lr_rest > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(self.mask.ratio > 0.0 && self.mask.ratio <= 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1]", self.mask.ratio)));
        }
        if self.mask.block == 0 {
            return Err(Error::Config("mask block must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss_sum: f64,
    pub loss_mean: f64,
    pub masked_frames: usize,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,split,loss_sum,loss_mean,masked_frames";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{}",
            self.epoch, self.split, self.loss_sum, self.loss_mean, self.masked_frames
        )
    }
}

/// Learning rate for a parameter under the two-group scheme, or `None`
/// when the parameter is held fixed.
pub fn pretrain_lr(name: &str, cfg: &PretrainConfig) -> Option<f64> {
    if name.starts_with(TRANSFORMER_PREFIX) {
        Some(cfg.lr_backbone)
    } else if !cfg.train_cnn && name.starts_with("encoder.conv") {
        None
    } else {
        Some(cfg.lr_rest)
    }
}

/// Mask drawn for one clip in one epoch, from its own derived stream so that
/// batch order cannot change it.
pub fn clip_mask(seed: u64, iteration: usize, epoch: usize, clip: usize, frames: usize, cfg: &MaskConfig) -> Result<MaskSpec> {
    if !cfg.enabled {
        return Ok(MaskSpec::none(frames));
    }
    let mut rng = substream(seed, "mask", &[iteration as u64, epoch as u64, clip as u64]);
    sample_block_mask(&mut rng, frames, cfg.ratio, cfg.block.min(frames))
}

/// Frames scored for a clip: the masked frames, or every frame when masking
/// is disabled.
fn scored_frames(mask: &MaskSpec) -> Vec<usize> {
    if mask.count() == 0 {
        (0..mask.frames()).collect()
    } else {
        mask.indices().to_vec()
    }
}

/// Sum and count of loss terms over a batch; the returned `Var` is the raw
/// sum.
pub fn batch_loss(
    g: &mut Graph,
    model: &MaskedModel,
    store: &ParamStore,
    clips: &[(&Array, &PseudoLabelMatrix, MaskSpec)],
    means: &Array,
    cfg: &MamLossConfig,
) -> Result<(Var, usize, usize)> {
    let mut sums = Vec::with_capacity(clips.len());
    let mut frames_scored = 0;
    for (features, gamma, mask) in clips {
        let m = (mask.count() > 0).then_some(mask);
        let preds = model.forward(g, store, features, m)?;
        let frames = scored_frames(mask);
        frames_scored += frames.len();
        let terms = loss_terms(g, preds, means, gamma, &frames, cfg)?;
        sums.push(g.sum(terms));
    }
    let mut total = *sums
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    for &s in &sums[1..] {
        total = g.add(total, s)?;
    }
    let units = frames_scored * terms_per_frame(cfg.loss_kind, means.rows());
    Ok((total, frames_scored, units))
}

/// One M-step: `cfg.epochs` passes over `clips` with fresh masks, returning
/// one log row per epoch and the optimizer state. A fresh optimizer is used
/// for every call.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    model: &MaskedModel,
    store: &mut ParamStore,
    clips: &[&Array],
    labels: &[PseudoLabelMatrix],
    means: &Array,
    cfg: &PretrainConfig,
    seed: u64,
    iteration: usize,
) -> Result<(Vec<EpochLog>, AdamW)> {
    cfg.validate()?;
    if clips.len() != labels.len() {
        return Err(Error::Data(format!("{} clips but {} pseudo-label files", clips.len(), labels.len())));
    }
    if clips.is_empty() {
        return Err(Error::Data("no clips to pretrain on".into()));
    }
    let mut opt = AdamW::new(store, cfg.adamw);
    let frozen: Vec<ParamId> = store
        .ids()
        .filter(|&id| pretrain_lr(store.name(id), cfg).is_none())
        .collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut substream(seed, "shuffle", &[iteration as u64, epoch as u64]));
        let (mut loss_sum, mut units, mut masked) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let items = batch
                .iter()
                .map(|&i| {
                    let mask = clip_mask(seed, iteration, epoch, i, clips[i].cols(), &cfg.mask)?;
                    Ok((clips[i], &labels[i], mask))
                })
                .collect::<Result<Vec<_>>>()?;
            store.zero_grad();
            let mut g = Graph::new();
            g.freeze(frozen.iter().copied());
            let (total, frames, n) = batch_loss(&mut g, model, store, &items, means, &cfg.loss)?;
            let raw = g.value(total).data()[0];
            if !raw.is_finite() {
                return Err(Error::Numerical(format!("non-finite pretraining loss at epoch {epoch}")));
            }
            let loss = g.scale(total, 1.0 / n as f64);
            g.backward_into(loss, store)?;
            opt.step(store, |_, name| pretrain_lr(name, cfg))?;
            loss_sum += raw;
            units += n;
            masked += frames;
        }
        logs.push(EpochLog {
            epoch,
            split: "train".into(),
            loss_sum,
            loss_mean: loss_sum / units as f64,
            masked_frames: masked,
        });
    }
    Ok((logs, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::check::{check_param_gradients, DEFAULT_STEP};
    use crate::proto::{fit_gmm, GmmConfig};

    fn tiny_enc() -> EncoderConfig {
        EncoderConfig {
            freq_bins: 4,
            conv_channels: vec![8],
            conv_kernel: 3,
            d_model: 8,
            transformer_blocks: 1,
            heads: 2,
            ff_hidden: 8,
            time_downsample: 2,
            freq_bands: 2,
            embed_dim: 8,
            max_frames: 12,
            residual_init_scale: 1.0,
        }
    }

    fn tiny_ctx() -> ContextConfig {
        ContextConfig {
            blocks: 1,
            heads: 2,
            ff_hidden: 8,
            max_distance: 3,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Array {
        let mut rng = substream(seed, "test", &[]);
        Array::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_gamma(t: usize, k: usize, seed: u64) -> PseudoLabelMatrix {
        let mut g = random(t, k, seed).map(|v| v.exp());
        for r in 0..t {
            let s: f64 = g.row(r).iter().sum();
            g.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        PseudoLabelMatrix { gamma: g }
    }

    #[test]
    fn saturated_mask_covers_everything() {
        let mut rng = substream(0, "m", &[]);
        let m = sample_block_mask(&mut rng, 20, 1.0, 20).unwrap();
        assert_eq!(m.count(), 20);
    }

    #[test]
    fn mask_count_bounds() {
        for seed in 0..1000 {
            let mut rng = substream(seed, "m", &[]);
            let m = sample_block_mask(&mut rng, 20, 0.75, 10).unwrap();
            assert!((15..=20).contains(&m.count()));
            for &i in m.indices() {
                assert!(m.blocks().iter().any(|&(s, e)| s <= i && i < e));
            }
        }
    }

    #[test]
    fn invalid_mask_parameters() {
        let mut rng = substream(1, "m", &[]);
        assert!(matches!(sample_block_mask(&mut rng, 20, 0.0, 5), Err(Error::Parameter(_))));
        assert!(matches!(sample_block_mask(&mut rng, 20, 1.5, 5), Err(Error::Parameter(_))));
        assert!(matches!(sample_block_mask(&mut rng, 20, 0.5, 0), Err(Error::Parameter(_))));
        assert!(matches!(sample_block_mask(&mut rng, 20, 0.5, 21), Err(Error::Parameter(_))));
    }

    fn context_only() -> (ParamStore, ContextNetwork) {
        let mut store = ParamStore::new();
        let mut rng = substream(2, "ctx", &[]);
        let ctx = ContextNetwork::new(&mut store, 8, &tiny_ctx(), &mut rng).unwrap();
        (store, ctx)
    }

    #[test]
    fn apply_mask_cases() {
        let (store, ctx) = context_only();
        let x = random(5, 8, 3);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let same = ctx.apply_mask(&mut g, &store, v, &MaskSpec::none(5)).unwrap();
        assert_eq!(g.value(same), &x);
        let full = ctx.apply_mask(&mut g, &store, v, &MaskSpec::all(5)).unwrap();
        for t in 0..5 {
            assert_eq!(g.value(full).row(t), store.value(ctx.mask_token).data());
        }
        let bad = MaskSpec::from_indices(9, vec![8]).unwrap();
        assert!(matches!(ctx.apply_mask(&mut g, &store, v, &bad), Err(Error::Contract(_))));
        assert!(MaskSpec::from_indices(5, vec![5]).is_err());
    }

    #[test]
    fn mask_token_gradient_iff_nonempty_mask() {
        let (mut store, ctx) = context_only();
        for (mask, expect) in [(MaskSpec::none(6), false), (MaskSpec::from_indices(6, vec![2]).unwrap(), true)] {
            store.zero_grad();
            let mut g = Graph::new();
            let x = g.constant(random(6, 8, 4));
            let m = ctx.apply_mask(&mut g, &store, x, &mask).unwrap();
            let y = ctx.forward(&mut g, &store, m).unwrap();
            let l = g.sum(y);
            let w = g.constant(random(6, 8, 5));
            let l2 = g.mul(y, w).unwrap();
            let l2 = g.sum(l2);
            let l = g.add(l, l2).unwrap();
            g.backward_into(l, &mut store).unwrap();
            let moved = store.grad(ctx.mask_token).data().iter().any(|&v| v != 0.0);
            assert_eq!(moved, expect);
        }
    }

    #[test]
    fn single_frame_context_is_finite() {
        let (store, ctx) = context_only();
        let mut g = Graph::new();
        let x = g.constant(random(1, 8, 6));
        let y = ctx.forward(&mut g, &store, x).unwrap();
        assert!(g.value(y).all_finite());
    }

    #[test]
    fn context_gradient_check() {
        let (store, ctx) = context_only();
        let x = random(6, 8, 7);
        let w = random(6, 8, 8);
        let mut store = store;
        // nonzero bias tables so their gradient path is exercised
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains("rel_bias") {
                *store.value_mut(id) = random(1, 7, id.index() as u64);
            }
        }
        let err = check_param_gradients(
            &store,
            |g, s| {
                let x = g.constant(x.clone());
                let m = ctx.apply_mask(g, s, x, &MaskSpec::from_indices(6, vec![1, 2])?)?;
                let y = ctx.forward(g, s, m)?;
                let w = g.constant(w.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            DEFAULT_STEP,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_predictor_gives_zero_predictions() {
        let mut store = ParamStore::new();
        let mut rng = substream(9, "p", &[]);
        let p = Linear::new(&mut store, "predictor", 8, 8, true, &mut rng).unwrap();
        for id in p.params() {
            store.value_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let x = g.constant(random(4, 8, 10));
        let y = p.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).dims2(), (4, 8));
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn probability_point_values() {
        let cfg = MamLossConfig::default();
        assert_eq!(prototype_probability(0.5, &cfg), 0.5);
        assert!((prototype_probability(1.0, &cfg) - 0.999_954_6).abs() < 1e-7);
        assert!((prototype_probability(0.0, &cfg) - 4.5398e-5).abs() < 1e-9);
        assert!((bce_scalar(0.5, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_scalar(prototype_probability(1.0, &cfg), 1.0) - 4.54e-5).abs() < 1e-7);
        assert!((bce_scalar(prototype_probability(0.0, &cfg), 0.0) - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn bce_is_monotone_in_similarity() {
        let cfg = MamLossConfig::default();
        let grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 * 0.05).collect();
        for w in grid.windows(2) {
            let (a, b) = (prototype_probability(w[0], &cfg), prototype_probability(w[1], &cfg));
            assert!(bce_scalar(b, 1.0) < bce_scalar(a, 1.0));
            assert!(bce_scalar(b, 0.0) > bce_scalar(a, 0.0));
        }
    }

    fn graph_terms(preds: &Array, means: &Array, gamma: &PseudoLabelMatrix, frames: &[usize], cfg: &MamLossConfig) -> Array {
        let mut g = Graph::new();
        let p = g.constant(preds.clone());
        let t = loss_terms(&mut g, p, means, gamma, frames, cfg).unwrap();
        g.value(t).clone()
    }

    #[test]
    fn graph_terms_match_direct_evaluation() {
        let cfg = MamLossConfig::default();
        let (preds, means, gamma) = (random(6, 5, 11), random(3, 5, 12), random_gamma(6, 3, 13));
        let frames = [0, 2, 5];
        let terms = graph_terms(&preds, &means, &gamma, &frames, &cfg);
        for (r, &t) in frames.iter().enumerate() {
            for k in 0..3 {
                let direct = prototype_bce_term(preds.row(t), means.row(k), gamma.gamma.get(t, k), &cfg);
                assert!((terms.get(r, k) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unmasked_predictions_do_not_matter() {
        let cfg = MamLossConfig::default();
        let (preds, means, gamma) = (random(6, 5, 14), random(3, 5, 15), random_gamma(6, 3, 16));
        let frames = [1, 2, 3];
        let base = graph_terms(&preds, &means, &gamma, &frames, &cfg).sum();
        let mut zeroed = preds.clone();
        zeroed.row_mut(4).fill(0.0);
        assert_eq!(graph_terms(&zeroed, &means, &gamma, &frames, &cfg).sum(), base);
    }

    #[test]
    fn prototype_terms_are_local() {
        let cfg = MamLossConfig::default();
        let (preds, means, gamma) = (random(6, 5, 17), random(4, 5, 18), random_gamma(6, 4, 19));
        let frames = [0, 1, 4];
        let base = graph_terms(&preds, &means, &gamma, &frames, &cfg);
        let mut moved = means.clone();
        moved.set(2, 1, moved.get(2, 1) + 0.3);
        let after = graph_terms(&preds, &moved, &gamma, &frames, &cfg);
        for r in 0..3 {
            for k in 0..4 {
                let same = base.get(r, k).to_bits() == after.get(r, k).to_bits();
                assert_eq!(same, k != 2);
            }
        }
    }

    #[test]
    fn info_nce_cases() {
        let cfg = MamLossConfig {
            loss_kind: LossKind::InfoNce,
            ..MamLossConfig::default()
        };
        let single = graph_terms(&random(2, 3, 20), &random(1, 3, 21), &random_gamma(2, 1, 22), &[0, 1], &cfg);
        assert!(single.data().iter().all(|v| v.abs() < 1e-15));

        // every prediction orthogonal to all four prototypes
        let means = Array::from_rows(&[
            vec![0.0, 1.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let preds = Array::from_rows(&[vec![1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        let t = graph_terms(&preds, &means, &random_gamma(1, 4, 23), &[0], &cfg);
        assert!((t.data()[0] - 4f64.ln()).abs() < 1e-12);

        let means = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let preds = Array::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let gamma = PseudoLabelMatrix {
            gamma: Array::from_rows(&[vec![0.9, 0.1]]).unwrap(),
        };
        let t = graph_terms(&preds, &means, &gamma, &[0], &cfg);
        let want = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((t.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn empty_frame_set_is_rejected() {
        let mut g = Graph::new();
        let p = g.constant(random(3, 2, 24));
        let r = loss_terms(&mut g, p, &random(2, 2, 25), &random_gamma(3, 2, 26), &[], &MamLossConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn loss_attains_entropy_bound_at_matching_predictions() {
        // predictions along the prototypes give p = σ(10) or σ(-10); choosing
        // γ equal to those probabilities puts the loss at Σ H(γ)
        let cfg = MamLossConfig::default();
        let means = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let preds = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let (hi, lo) = (sigmoid(10.0), sigmoid(-10.0));
        let gamma = PseudoLabelMatrix {
            gamma: Array::from_rows(&[vec![hi, lo], vec![lo, hi]]).unwrap(),
        };
        let t = graph_terms(&preds, &means, &gamma, &[0, 1], &cfg);
        let h = |p: f64| -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        assert!((t.sum() - 2.0 * (h(hi) + h(lo))).abs() < 1e-12);
    }

    fn tiny_model(seed: u64) -> (ParamStore, MaskedModel) {
        let mut store = ParamStore::new();
        let m = MaskedModel::new(&mut store, &tiny_enc(), &tiny_ctx(), seed).unwrap();
        (store, m)
    }

    #[test]
    fn end_to_end_gradient_check() {
        let (store, model) = tiny_model(27);
        let feats = random(4, 6, 28);
        let means = random(3, 8, 29);
        let gamma = random_gamma(6, 3, 30);
        let mask = MaskSpec::from_indices(6, vec![1, 2, 4]).unwrap();
        let cfg = MamLossConfig::default();
        let err = check_param_gradients(
            &store,
            |g, s| {
                let items = [(&feats, &gamma, mask.clone())];
                let (total, _, n) = batch_loss(g, &model, s, &items, &means, &cfg)?;
                Ok(g.scale(total, 1.0 / n as f64))
            },
            DEFAULT_STEP,
            None,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn duplicated_clip_doubles_raw_sum() {
        let (store, model) = tiny_model(31);
        let feats = random(4, 8, 32);
        let means = random(3, 8, 33);
        let gamma = random_gamma(8, 3, 34);
        let mask = MaskSpec::from_indices(8, vec![0, 3, 4]).unwrap();
        let cfg = MamLossConfig::default();
        let mut g = Graph::inference();
        let one = [(&feats, &gamma, mask.clone())];
        let (a, _, _) = batch_loss(&mut g, &model, &store, &one, &means, &cfg).unwrap();
        let two = [(&feats, &gamma, mask.clone()), (&feats, &gamma, mask)];
        let (b, _, n) = batch_loss(&mut g, &model, &store, &two, &means, &cfg).unwrap();
        assert_eq!(g.value(b).data()[0], 2.0 * g.value(a).data()[0]);
        assert_eq!(n, 18);
    }

    fn toy_corpus(n: usize) -> (Vec<Array>, Vec<PseudoLabelMatrix>, Array) {
        let clips: Vec<Array> = (0..n).map(|i| random(4, 12, 100 + i as u64)).collect();
        let pooled = Array::vstack(&clips.iter().map(|c| c.transpose()).collect::<Vec<_>>().iter().collect::<Vec<_>>()).unwrap();
        let mut rng = substream(0, "gmm", &[]);
        let fit = fit_gmm(&pooled, 3, &mut rng, &GmmConfig::default()).unwrap();
        let labels = clips.iter().map(|c| fit.model.responsibilities(&c.transpose()).unwrap()).collect();
        // prototypes live in feature space here; lift them to D = 8
        let mut means = Array::zeros(&[3, 8]);
        for k in 0..3 {
            means.row_mut(k)[..4].copy_from_slice(fit.model.means.row(k));
        }
        (clips, labels, means)
    }

    fn tiny_pretrain_cfg(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch_size: 2,
            mask: MaskConfig {
                enabled: true,
                ratio: 0.5,
                block: 3,
            },
            lr_backbone: 1e-2,
            lr_rest: 1e-2,
            ..PretrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (mut store, model) = tiny_model(35);
        let (clips, labels, means) = toy_corpus(3);
        let refs: Vec<&Array> = clips.iter().collect();
        let before = store.value_hash();
        let (logs, _) = pretrain(&model, &mut store, &refs, &labels, &means, &tiny_pretrain_cfg(0), 0, 1).unwrap();
        assert!(logs.is_empty());
        assert_eq!(store.value_hash(), before);
    }

    #[test]
    fn pretraining_reduces_loss_and_is_deterministic() {
        let (clips, labels, means) = toy_corpus(4);
        let refs: Vec<&Array> = clips.iter().collect();
        let run = || {
            let (mut store, model) = tiny_model(36);
            let (logs, _) = pretrain(&model, &mut store, &refs, &labels, &means, &tiny_pretrain_cfg(25), 7, 1).unwrap();
            (store.value_hash(), logs)
        };
        let (h1, l1) = run();
        let (h2, l2) = run();
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
        assert!(l1.last().unwrap().loss_mean < 0.8 * l1[0].loss_mean, "{:?}", l1.iter().map(|l| l.loss_mean).collect::<Vec<_>>());
    }

    #[test]
    fn frozen_cnn_stays_fixed() {
        let (clips, labels, means) = toy_corpus(2);
        let refs: Vec<&Array> = clips.iter().collect();
        let (mut store, model) = tiny_model(37);
        let cfg = PretrainConfig {
            train_cnn: false,
            ..tiny_pretrain_cfg(2)
        };
        let conv: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with("encoder.conv")).collect();
        let before: Vec<Array> = conv.iter().map(|&id| store.value(id).clone()).collect();
        pretrain(&model, &mut store, &refs, &labels, &means, &cfg, 0, 1).unwrap();
        for (id, b) in conv.iter().zip(before) {
            assert_eq!(store.value(*id), &b);
        }
    }

    #[test]
    fn disabled_mask_scores_every_frame() {
        let cfg = MaskConfig {
            enabled: false,
            ..MaskConfig::default()
        };
        let m = clip_mask(0, 1, 0, 0, 30, &cfg).unwrap();
        assert_eq!(m.count(), 0);
        assert_eq!(scored_frames(&m).len(), 30);
    }

    #[test]
    fn two_learning_rate_groups() {
        let cfg = PretrainConfig {
            lr_backbone: 1e-5,
            lr_rest: 2e-4,
            ..PretrainConfig::default()
        };
        assert_eq!(pretrain_lr("encoder.transformer.patch.weight", &cfg), Some(1e-5));
        assert_eq!(pretrain_lr("context.block0.ff_in.weight", &cfg), Some(2e-4));
        assert_eq!(pretrain_lr("encoder.conv0.weight", &cfg), Some(2e-4));
    }
}

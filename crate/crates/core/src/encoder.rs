//! Dual-branch frame encoder.
//!
//! A convolutional branch runs at full time resolution. A transformer branch
//! embeds frequency-band × time-stride patches, attends over all of them,
//! pools the bands at each time step with a learned query, and is then
//! upsampled back to frame rate. Both branches are projected to the latent
//! width and summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgrad::nn::{uniform, LayerNorm, Linear, TransformerBlock};
use crate::numgrad::{upsample_linear, Array, Graph, ParamId, ParamStore, Var};
use crate::rng::Rng;

/// Parameter-name prefix of the transformer branch (its own learning-rate group).
pub const TRANSFORMER_PREFIX: &str = "encoder.transformer.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub freq_bins: usize,
    /// Output width of each convolution layer.
    pub conv_channels: Vec<usize>,
    pub conv_kernel: usize,
    pub d_model: usize,
    pub transformer_blocks: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    /// Time stride `u` of transformer patches.
    pub time_downsample: usize,
    pub freq_bands: usize,
    /// Merged latent width `D`.
    pub embed_dim: usize,
    pub max_frames: usize,
    /// Factor on the initial weights that write into the transformer
    /// branch's residual stream.
    pub residual_init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            freq_bins: 16,
            conv_channels: vec![32, 32],
            conv_kernel: 3,
            d_model: 32,
            transformer_blocks: 2,
            heads: 2,
            ff_hidden: 64,
            time_downsample: 4,
            freq_bands: 4,
            embed_dim: 32,
            max_frames: 200,
            residual_init_scale: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.time_downsample < 1 {
            return bad("time_downsample must be >= 1".into());
        }
        if self.embed_dim == 0 || self.d_model == 0 || self.freq_bins == 0 {
            return bad("embed_dim, d_model and freq_bins must be positive".into());
        }
        if self.freq_bands == 0 || !self.freq_bins.is_multiple_of(self.freq_bands) {
            return bad(format!(
                "{} frequency bins cannot be split into {} bands",
                self.freq_bins, self.freq_bands
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return bad("conv_channels must be a non-empty list of positive widths".into());
        }
        if self.conv_kernel.is_multiple_of(2) {
            return bad("conv_kernel must be odd".into());
        }
        if self.max_frames == 0 {
            return bad("max_frames must be positive".into());
        }
        if !(self.residual_init_scale >= 0.0 && self.residual_init_scale.is_finite()) {
            return bad("residual_init_scale must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn time_tokens(&self, frames: usize) -> usize {
        frames.div_ceil(self.time_downsample)
    }

    fn band_patch_len(&self) -> usize {
        (self.freq_bins / self.freq_bands) * self.time_downsample
    }

    /// Patch rows hold every band's slot so each band gets its own
    /// embedding weights; only the token's own slot is nonzero.
    fn patch_len(&self) -> usize {
        self.band_patch_len() * self.freq_bands
    }
}

/// One embedding per frame, `T × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    pub embeddings: Array,
}

impl LatentSequence {
    pub fn frames(&self) -> usize {
        self.embeddings.rows()
    }
}

#[derive(Clone, Debug)]
struct ConvLayer {
    linear: Linear,
    norm: LayerNorm,
}

/// Learned-query attention over the band tokens of each time step.
#[derive(Clone, Debug)]
pub struct FreqAttentionPool {
    pub query: ParamId,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl FreqAttentionPool {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            query: store.add(format!("{name}.query"), uniform(1, dim, 0.5, rng))?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, true, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true, rng)?,
            heads,
        })
    }

    /// `tokens` holds `bands` consecutive rows per time step; returns one row
    /// per time step.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var, bands: usize) -> Result<Var> {
        let n = g.value(tokens).rows();
        if bands == 0 || !n.is_multiple_of(bands) {
            return Err(Error::Dimension {
                op: "freq_attention_pool",
                left: g.value(tokens).shape().to_vec(),
                right: vec![bands],
            });
        }
        let steps = n / bands;
        let k = self.key.forward(g, store, tokens)?;
        let v = self.value.forward(g, store, tokens)?;
        let q = g.param(store, self.query);
        let dim = g.value(k).cols();
        let dh = dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (kh, vh, qh) = if self.heads == 1 {
                (k, v, q)
            } else {
                (
                    g.slice_cols(k, h * dh, dh)?,
                    g.slice_cols(v, h * dh, dh)?,
                    g.slice_cols(q, h * dh, dh)?,
                )
            };
            let scores = g.matmul_nt(kh, qh)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let scores = g.reshape(scores, steps, bands)?;
            let weights = g.softmax(scores, 1.0)?;
            let weights = g.reshape(weights, n, 1)?;
            let weighted = g.mul_col(vh, weights)?;
            outs.push(g.sum_row_groups(weighted, bands)?);
        }
        let merged = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, store, merged)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    conv: Vec<ConvLayer>,
    patch: Linear,
    time_pos: ParamId,
    band_pos: ParamId,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    pub pool: FreqAttentionPool,
    pub proj_conv: Linear,
    pub proj_transformer: Linear,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut conv = Vec::with_capacity(cfg.conv_channels.len());
        let mut in_ch = cfg.freq_bins;
        for (l, &out_ch) in cfg.conv_channels.iter().enumerate() {
            let name = format!("encoder.conv{l}");
            conv.push(ConvLayer {
                linear: Linear::new(store, &name, cfg.conv_kernel * in_ch, out_ch, true, rng)?,
                norm: LayerNorm::new(store, &format!("{name}.norm"), out_ch)?,
            });
            in_ch = out_ch;
        }
        let tp = TRANSFORMER_PREFIX;
        let patch = Linear::new(store, &format!("{tp}patch"), cfg.patch_len(), cfg.d_model, true, rng)?;
        let time_pos = store.add(
            format!("{tp}time_pos"),
            uniform(cfg.time_tokens(cfg.max_frames), cfg.d_model, 0.1, rng),
        )?;
        let band_pos = store.add(
            format!("{tp}band_pos"),
            uniform(cfg.freq_bands, cfg.d_model, 0.1, rng),
        )?;
        let blocks = (0..cfg.transformer_blocks)
            .map(|b| {
                let block =
                    TransformerBlock::new(store, &format!("{tp}block{b}"), cfg.d_model, cfg.heads, cfg.ff_hidden, rng)?;
                block.scale_residual_init(store, cfg.residual_init_scale);
                Ok(block)
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(store, &format!("{tp}norm"), cfg.d_model)?;
        let pool = FreqAttentionPool::new(store, "encoder.pool", cfg.d_model, cfg.heads, rng)?;
        let proj_conv = Linear::new(store, "encoder.proj_conv", in_ch, cfg.embed_dim, true, rng)?;
        let proj_transformer = Linear::new(store, "encoder.proj_transformer", cfg.d_model, cfg.embed_dim, true, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            conv,
            patch,
            time_pos,
            band_pos,
            blocks,
            final_norm,
            pool,
            proj_conv,
            proj_transformer,
        })
    }

    fn check_input(&self, features: &Array) -> Result<usize> {
        let (f, t) = features.dims2();
        if f != self.cfg.freq_bins || t == 0 || t > self.cfg.max_frames {
            return Err(Error::Dimension {
                op: "encoder input",
                left: features.shape().to_vec(),
                right: vec![self.cfg.freq_bins, self.cfg.max_frames],
            });
        }
        Ok(t)
    }

    /// Temporal convolutions over the `F × T` input, `T × C_last` out.
    pub fn conv_branch(&self, g: &mut Graph, store: &ParamStore, features: &Array) -> Result<Var> {
        self.check_input(features)?;
        let mut x = g.constant(features.transpose());
        for layer in &self.conv {
            let cols = g.im2col(x, self.cfg.conv_kernel)?;
            let y = layer.linear.forward(g, store, cols)?;
            let y = layer.norm.forward(g, store, y)?;
            x = g.gelu(y);
        }
        Ok(x)
    }

    /// Band × stride patches, time-major then band: row `i·bands + b`,
    /// with the values in column slot `b`.
    pub fn patchify(&self, features: &Array) -> Result<Array> {
        let t = self.check_input(features)?;
        let (u, bands) = (self.cfg.time_downsample, self.cfg.freq_bands);
        let band_h = self.cfg.freq_bins / bands;
        let steps = self.cfg.time_tokens(t);
        let (slot, plen) = (self.cfg.band_patch_len(), self.cfg.patch_len());
        let mut data = vec![0.0; steps * bands * plen];
        for i in 0..steps {
            for b in 0..bands {
                let row = &mut data[(i * bands + b) * plen + b * slot..][..slot];
                let mut k = 0;
                for f in b * band_h..(b + 1) * band_h {
                    for dt in 0..u {
                        // frames past the end replicate the last frame
                        let src = (i * u + dt).min(t - 1);
                        row[k] = features.get(f, src);
                        k += 1;
                    }
                }
            }
        }
        Array::new(&[steps * bands, plen], data)
    }

    /// Time-frequency tokens after the transformer blocks,
    /// `(⌈T/u⌉ · bands) × d_model`.
    pub fn transformer_branch(&self, g: &mut Graph, store: &ParamStore, features: &Array) -> Result<Var> {
        let patches = self.patchify(features)?;
        let bands = self.cfg.freq_bands;
        let steps = patches.rows() / bands;
        let x = g.constant(patches);
        let mut x = self.patch.forward(g, store, x)?;
        let time_idx: Vec<usize> = (0..steps * bands).map(|r| r / bands).collect();
        let band_idx: Vec<usize> = (0..steps * bands).map(|r| r % bands).collect();
        let tp = g.param(store, self.time_pos);
        let tp = g.gather_rows(tp, &time_idx)?;
        let bp = g.param(store, self.band_pos);
        let bp = g.gather_rows(bp, &band_idx)?;
        x = g.add(x, tp)?;
        x = g.add(x, bp)?;
        for block in &self.blocks {
            x = block.forward(g, store, x, None)?;
        }
        self.final_norm.forward(g, store, x)
    }

    /// Frame-level latent sequence, `T × D`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, features: &Array) -> Result<Var> {
        let t = self.check_input(features)?;
        let conv = self.conv_branch(g, store, features)?;
        let conv = self.proj_conv.forward(g, store, conv)?;
        let tokens = self.transformer_branch(g, store, features)?;
        let pooled = self.pool.forward(g, store, tokens, self.cfg.freq_bands)?;
        let up = g.upsample_linear(pooled, self.cfg.time_downsample)?;
        let idx: Vec<usize> = (0..t).collect();
        let up = g.gather_rows(up, &idx)?;
        let trans = self.proj_transformer.forward(g, store, up)?;
        g.add(conv, trans)
    }

    pub fn encode_array(&self, store: &ParamStore, features: &Array) -> Result<LatentSequence> {
        let mut g = Graph::inference();
        let z = self.encode(&mut g, store, features)?;
        Ok(LatentSequence {
            embeddings: g.value(z).clone(),
        })
    }

    /// Iteration-zero embeddings: transformer-branch tokens averaged over
    /// bands and upsampled to frame rate, `T × d_model`.
    pub fn initial_embeddings(&self, store: &ParamStore, features: &Array) -> Result<LatentSequence> {
        let t = self.check_input(features)?;
        let mut g = Graph::inference();
        let tokens = self.transformer_branch(&mut g, store, features)?;
        let summed = g.sum_row_groups(tokens, self.cfg.freq_bands)?;
        let mean = g.scale(summed, 1.0 / self.cfg.freq_bands as f64);
        let up = upsample_linear(g.value(mean), self.cfg.time_downsample)?;
        let idx: Vec<usize> = (0..t).collect();
        Ok(LatentSequence {
            embeddings: up.select_rows(&idx),
        })
    }

    /// Every parameter of the transformer branch (patch embedding, positions,
    /// blocks, final norm).
    pub fn transformer_params(store: &ParamStore) -> Vec<ParamId> {
        store.ids().filter(|&id| store.name(id).starts_with(TRANSFORMER_PREFIX)).collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng as _;

    use super::*;
    use crate::numgrad::check::{check_param_gradients, DEFAULT_STEP};
    use crate::rng::substream;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            freq_bins: 4,
            conv_channels: vec![6, 6],
            conv_kernel: 3,
            d_model: 6,
            transformer_blocks: 1,
            heads: 2,
            ff_hidden: 8,
            time_downsample: 2,
            freq_bands: 2,
            embed_dim: 6,
            max_frames: 8,
            residual_init_scale: 1.0,
        }
    }

    fn random_features(f: usize, t: usize, seed: u64) -> Array {
        let mut rng = substream(seed, "feat", &[]);
        Array::new(&[f, t], (0..f * t).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = substream(seed, "init", &[]);
        let enc = Encoder::new(&mut store, cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn conv_branch_is_linear_at_zero() {
        let (mut store, enc) = build(&tiny(), 0);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".bias") {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let y = enc.conv_branch(&mut g, &store, &Array::zeros(&[4, 8])).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shapes() {
        let cfg = EncoderConfig::default();
        let (store, enc) = build(&cfg, 1);
        for t in [1, 7, 50, 200] {
            let feats = random_features(16, t, t as u64);
            let mut g = Graph::new();
            let c = enc.conv_branch(&mut g, &store, &feats).unwrap();
            assert_eq!(g.value(c).dims2(), (t, 32));
            let tok = enc.transformer_branch(&mut g, &store, &feats).unwrap();
            assert_eq!(g.value(tok).rows(), t.div_ceil(4) * 4);
            let z = enc.encode(&mut g, &store, &feats).unwrap();
            assert_eq!(g.value(z).dims2(), (t, 32));
            assert!(g.value(z).all_finite());
        }
    }

    #[test]
    fn wrong_frequency_count_is_a_dimension_error() {
        let (store, enc) = build(&tiny(), 2);
        let mut g = Graph::new();
        assert!(matches!(
            enc.encode(&mut g, &store, &Array::zeros(&[5, 8])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn degenerate_patching_is_per_frame() {
        let cfg = EncoderConfig {
            time_downsample: 1,
            freq_bands: 1,
            ..tiny()
        };
        let (_, enc) = build(&cfg, 3);
        let feats = random_features(4, 8, 3);
        let p = enc.patchify(&feats).unwrap();
        assert_eq!(p.dims2(), (8, 4));
        assert_eq!(p, feats.transpose());
    }

    #[test]
    fn band_order_matters() {
        let (store, enc) = build(&tiny(), 4);
        let feats = random_features(4, 8, 4);
        let mut swapped = feats.clone();
        for t in 0..8 {
            for f in 0..2 {
                swapped.set(f, t, feats.get(f + 2, t));
                swapped.set(f + 2, t, feats.get(f, t));
            }
        }
        let a = enc.encode_array(&store, &feats).unwrap();
        let b = enc.encode_array(&store, &swapped).unwrap();
        assert!(a.embeddings.max_abs_diff(&b.embeddings) > 1e-6);
    }

    #[test]
    fn single_band_pool_returns_projected_value() {
        let mut store = ParamStore::new();
        let mut rng = substream(5, "pool", &[]);
        let pool = FreqAttentionPool::new(&mut store, "p", 4, 2, &mut rng).unwrap();
        let tokens = random_features(3, 4, 5);
        let mut g = Graph::new();
        let x = g.constant(tokens.clone());
        let y = pool.forward(&mut g, &store, x, 1).unwrap();
        let v = pool.value.forward(&mut g, &store, x).unwrap();
        let expect = pool.output.forward(&mut g, &store, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn identical_band_tokens_pool_to_their_projection() {
        let mut store = ParamStore::new();
        let mut rng = substream(6, "pool", &[]);
        let pool = FreqAttentionPool::new(&mut store, "p", 4, 2, &mut rng).unwrap();
        let row = random_features(1, 4, 6);
        let tokens = Array::vstack(&[&row, &row, &row]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(tokens);
        let y = pool.forward(&mut g, &store, x, 3).unwrap();
        let one = g.constant(row);
        let v = pool.value.forward(&mut g, &store, one).unwrap();
        let expect = pool.output.forward(&mut g, &store, v).unwrap();
        assert!(g.value(y).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn pool_gradient_check() {
        let mut store = ParamStore::new();
        let mut rng = substream(7, "pool", &[]);
        let pool = FreqAttentionPool::new(&mut store, "p", 4, 2, &mut rng).unwrap();
        let tokens = random_features(6, 4, 7);
        let w = random_features(2, 4, 8);
        let err = check_param_gradients(
            &store,
            |g, s| {
                let x = g.constant(tokens.clone());
                let y = pool.forward(g, s, x, 3)?;
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
    fn conv_gradient_check() {
        let cfg = EncoderConfig {
            freq_bins: 8,
            max_frames: 10,
            residual_init_scale: 1.0,
            freq_bands: 2,
            ..tiny()
        };
        let (store, enc) = build(&cfg, 8);
        let feats = random_features(8, 10, 9);
        let w = random_features(10, 6, 10);
        let err = check_param_gradients(
            &store,
            |g, s| {
                let y = enc.conv_branch(g, s, &feats)?;
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
    fn encode_gradient_check_on_tiny_config() {
        let (store, enc) = build(&tiny(), 11);
        let feats = random_features(4, 8, 12);
        let w = random_features(8, 6, 13);
        let err = check_param_gradients(
            &store,
            |g, s| {
                let y = enc.encode(g, s, &feats)?;
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
    fn zeroed_projections_give_zero_latents() {
        let (mut store, enc) = build(&tiny(), 14);
        for lin in [&enc.proj_conv, &enc.proj_transformer] {
            for id in lin.params() {
                store.value_mut(id).data_mut().fill(0.0);
            }
        }
        let z = enc.encode_array(&store, &random_features(4, 8, 15)).unwrap();
        assert!(z.embeddings.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn initial_embeddings_are_band_means() {
        let (store, enc) = build(&tiny(), 16);
        let feats = random_features(4, 8, 17);
        let z = enc.initial_embeddings(&store, &feats).unwrap();
        // brute force: mean of band tokens per step, then upsample
        let mut g = Graph::inference();
        let tok = enc.transformer_branch(&mut g, &store, &feats).unwrap();
        let tok = g.value(tok);
        let steps = tok.rows() / 2;
        let mut mean = Array::zeros(&[steps, 6]);
        for i in 0..steps {
            for j in 0..6 {
                mean.set(i, j, (tok.get(2 * i, j) + tok.get(2 * i + 1, j)) / 2.0);
            }
        }
        for t in 0..8 {
            let (s, frac) = (t / 2, (t % 2) as f64 / 2.0);
            let next = (s + 1).min(steps - 1);
            for j in 0..6 {
                let want = (1.0 - frac) * mean.get(s, j) + frac * mean.get(next, j);
                assert!((z.embeddings.get(t, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn initial_embeddings_single_band_unit_stride_are_raw_tokens() {
        let cfg = EncoderConfig {
            time_downsample: 1,
            freq_bands: 1,
            ..tiny()
        };
        let (store, enc) = build(&cfg, 18);
        let feats = random_features(4, 8, 19);
        let z = enc.initial_embeddings(&store, &feats).unwrap();
        let mut g = Graph::inference();
        let tok = enc.transformer_branch(&mut g, &store, &feats).unwrap();
        assert!(z.embeddings.max_abs_diff(g.value(tok)) < 1e-15);
    }

    #[test]
    fn conv_branch_is_local_in_time() {
        let (store, enc) = build(&tiny(), 20);
        let feats = random_features(4, 8, 21);
        let mut bumped = feats.clone();
        bumped.set(1, 0, feats.get(1, 0) + 1.0);
        let mut g = Graph::inference();
        let a = enc.conv_branch(&mut g, &store, &feats).unwrap();
        let b = enc.conv_branch(&mut g, &store, &bumped).unwrap();
        let reach = enc.cfg.conv_channels.len() * (enc.cfg.conv_kernel / 2);
        for t in 0..8 {
            let moved = g.value(a).row(t) != g.value(b).row(t);
            assert_eq!(moved, t <= reach, "frame {t}");
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let cfg = tiny();
        let (mut store, enc) = build(&cfg, 22);
        let feats = random_features(4, 8, 23);
        let w = random_features(8, 6, 24);
        let mut g = Graph::new();
        let z = enc.encode(&mut g, &store, &feats).unwrap();
        let w = g.constant(w);
        let y = g.mul(z, w).unwrap();
        let l = g.sum(y);
        g.backward_into(l, &mut store).unwrap();
        for id in store.ids() {
            assert!(store.grad(id).data().iter().any(|&v| v != 0.0), "{}", store.name(id));
        }
    }
}

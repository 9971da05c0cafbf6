//! Compact, fully deterministic latent diffusion model used as the default
//! backbone.
//!
//! It keeps the structure the editing algorithms depend on: a linear
//! autoencoder with an 8x spatial factor, a contextual text encoder with a
//! fixed 77-token window, and a noise predictor built from sixteen
//! transformer blocks (self-attention followed by cross-attention) over a
//! down/mid/up resolution ladder. Noise estimates combine the closed-form
//! denoiser of an isotropic Gaussian latent prior with the attention
//! residuals, so sampling is stable without trained weights.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::attention::{attention_kv_backward, multi_head_attention};
use super::schedule::scaled_linear_alpha_bar;
use super::text::{content_token_indices, tokenize};
use super::{
    ensure_finite, AttentionCall, AttentionController, AttentionKind, AttentionSite, Backbone,
    BackboneSpec, Branch, FrozenPredictor, LatentImage, NoisePredictor, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::image::PixelImage;
use crate::scalar::Scalar;

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE_FACTOR: usize = 8;

/// Latent-side divisor of each block's token grid, in traversal order:
/// two down levels, the middle block, then three up levels.
const BLOCK_DIVISORS: [usize; 16] = [4, 4, 8, 8, 16, 16, 16, 16, 16, 16, 8, 8, 8, 4, 4, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceConfig {
    pub seed: u64,
    pub working_resolution: usize,
    pub vocab_size: u32,
    pub sequence_length: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Variance of the Gaussian prior behind the closed-form denoiser.
    pub prior_variance: f64,
    pub self_attention_gain: f64,
    pub cross_attention_gain: f64,
    /// Extra attention logit a content word receives at the most
    /// foreground-like query position.
    pub grounding: f64,
    pub train_steps: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            seed: 15,
            working_resolution: 512,
            vocab_size: 4096,
            sequence_length: 77,
            embed_dim: 32,
            hidden: 16,
            heads: 2,
            prior_variance: 0.5,
            self_attention_gain: 0.05,
            cross_attention_gain: 0.2,
            grounding: 4.0,
            train_steps: 1000,
        }
    }
}

impl ReferenceConfig {
    /// Same model at a smaller working resolution (for fast experiments).
    pub fn at_resolution(working_resolution: usize) -> Self {
        Self {
            working_resolution,
            ..Self::default()
        }
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

struct Block<T> {
    divisor: usize,
    w_in: Array2<T>,
    w_q: Array2<T>,
    w_k: Array2<T>,
    w_v: Array2<T>,
    w_o: Array2<T>,
    w_eps: Array2<T>,
    x_q: Array2<T>,
    x_k: Array2<T>,
    x_v: Array2<T>,
    x_out: Array2<T>,
}

pub struct ReferenceBackbone<T> {
    config: ReferenceConfig,
    spec: BackboneSpec,
    alpha_bar: Vec<f64>,
    token_table: Array2<T>,
    positions: Array2<T>,
    w_time: Array2<T>,
    /// Unit vector per head subspace shared by grounded queries and keys.
    ground_dir: Array1<T>,
    blocks: Vec<Block<T>>,
}

fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z * std)
    })
}

impl<T: Scalar> ReferenceBackbone<T> {
    pub fn new(config: ReferenceConfig) -> Result<Self> {
        let res = config.working_resolution;
        if res == 0 || res % (DOWNSAMPLE_FACTOR * 16) != 0 {
            return Err(Error::invalid(format!(
                "working resolution {res} must be a positive multiple of 128"
            )));
        }
        if config.hidden % config.heads != 0 || config.heads == 0 {
            return Err(Error::invalid("hidden width must be divisible by heads"));
        }
        if config.sequence_length < 2 || config.vocab_size < 4 {
            return Err(Error::invalid("sequence length or vocabulary too small"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (hid, emb) = (config.hidden, config.embed_dim);
        let token_table = gaussian(&mut rng, config.vocab_size as usize, emb, 1.0);
        let positions = gaussian(&mut rng, config.sequence_length, emb, 0.3);
        let w_time = gaussian(&mut rng, hid, hid, 1.0 / (hid as f64).sqrt());
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let hd = hid / config.heads;
        let mut ground_dir = gaussian::<f64>(&mut rng, 1, hid, 1.0).row(0).to_owned();
        for mut head in ground_dir.exact_chunks_mut(hd) {
            let norm = head.dot(&head).sqrt();
            head.map_inplace(|v| *v /= norm);
        }
        // Query and key components along `ground_dir` meet in a logit of
        // `grounding` for a fully salient token at full objectness.
        let key_gain = (config.grounding * (hd as f64).sqrt()).sqrt();
        let blocks = BLOCK_DIVISORS
            .iter()
            .map(|&divisor| Block {
                divisor,
                w_in: gaussian(&mut rng, LATENT_CHANNELS, hid, inv(LATENT_CHANNELS)),
                w_q: gaussian(&mut rng, hid, hid, inv(hid)),
                w_k: gaussian(&mut rng, hid, hid, inv(hid)),
                w_v: gaussian(&mut rng, hid, hid, inv(hid)),
                w_o: gaussian(&mut rng, hid, hid, inv(hid)),
                w_eps: gaussian(&mut rng, hid, LATENT_CHANNELS, inv(hid)),
                x_q: gaussian(&mut rng, hid, hid, inv(hid)),
                x_k: {
                    let mut x = gaussian(&mut rng, emb, hid, inv(emb));
                    x.row_mut(emb - 1).assign(&ground_dir.mapv(|v| T::of(v * key_gain)));
                    x
                },
                x_v: gaussian(&mut rng, emb, hid, inv(emb)),
                x_out: gaussian(&mut rng, hid, LATENT_CHANNELS, inv(hid)),
            })
            .collect();
        let latent = res / DOWNSAMPLE_FACTOR;
        let spec = BackboneSpec {
            name: format!("reference-ldm/seed-{}", config.seed),
            latent_channels: LATENT_CHANNELS,
            downsample_factor: DOWNSAMPLE_FACTOR,
            sequence_length: config.sequence_length,
            embed_dim: emb,
            working_resolution: res,
            self_attention_resolutions: BLOCK_DIVISORS.iter().map(|d| latent / d).collect(),
        };
        Ok(Self {
            alpha_bar: scaled_linear_alpha_bar(config.train_steps),
            config,
            spec,
            token_table,
            positions,
            w_time,
            ground_dir: ground_dir.mapv(|v| T::of(v * key_gain)),
            blocks,
        })
    }

    pub fn config(&self) -> &ReferenceConfig {
        &self.config
    }

    /// Number of transformer blocks (each holds one self and one cross site).
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    fn check_latent(&self, latent: &LatentImage<T>, t: usize) -> Result<usize> {
        let (c, h, w) = latent.data.dim();
        if c != LATENT_CHANNELS || h != w || h == 0 || h % 16 != 0 {
            return Err(Error::invalid(format!(
                "reference predictor needs a square {LATENT_CHANNELS}-channel latent with side divisible by 16, got {:?}",
                latent.data.dim()
            )));
        }
        if t >= self.alpha_bar.len() {
            return Err(Error::invalid(format!("timestep {t} out of range")));
        }
        Ok(h)
    }

    fn time_embedding(&self, t: usize) -> Array1<T> {
        let hid = self.config.hidden;
        let half = hid / 2;
        let raw = Array1::from_shape_fn(hid, |i| {
            let k = i % half.max(1);
            let freq = (-(10000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            T::of(if i < half { arg.sin() } else { arg.cos() })
        });
        raw.dot(&self.w_time)
    }

    /// Closed-form noise estimate under an isotropic Gaussian latent prior.
    fn prior_noise(&self, latent: &Array3<T>, t: usize) -> Array3<T> {
        let a = self.alpha_bar[t];
        let coef = (1.0 - a).sqrt() / (a * self.config.prior_variance + 1.0 - a);
        latent.mapv(|v| v * T::of(coef))
    }

    /// Runs the self-attention half of block `b`; returns the post-attention
    /// token states.
    fn self_block(
        &self,
        b: usize,
        latent: &Array3<T>,
        temb: &Array1<T>,
        carry: Option<&Array2<T>>,
        controller: &mut Option<&mut dyn AttentionController<T>>,
    ) -> Result<Array2<T>> {
        let block = &self.blocks[b];
        let side = latent.dim().1;
        let res = side / block.divisor;
        let pooled = pool_tokens(latent, block.divisor);
        let mut pre = pooled.dot(&block.w_in);
        pre += &temb.view().insert_axis(Axis(0));
        if let Some(c) = carry {
            let c = resize_tokens(c, res);
            pre.scaled_add(T::of(0.5), &c);
        }
        let h = pre.mapv(|v| v.tanh());
        let q = h.dot(&block.w_q);
        let k = h.dot(&block.w_k);
        let v = h.dot(&block.w_v);
        let attn = multi_head_attention(q.view(), k.view(), v.view(), self.config.heads, None)?;
        let site = AttentionSite {
            layer_index: b,
            kind: AttentionKind::SelfAttention,
            resolution: res,
            branch: controller.as_ref().map_or(Branch::Target, |c| c.branch()),
        };
        let out = consult(controller, &site, &q, &k, &v, self.config.heads, &attn.probs, attn.output)?;
        Ok(h + out.dot(&block.w_o))
    }

    fn cross_block(
        &self,
        b: usize,
        h: &Array2<T>,
        objectness: &Array1<T>,
        cond: &TextEmbedding<T>,
        controller: &mut Option<&mut dyn AttentionController<T>>,
    ) -> Result<Array2<T>> {
        let q = self.cross_queries(b, h, objectness);
        let block = &self.blocks[b];
        let k = cond.embedding.dot(&block.x_k);
        let v = cond.embedding.dot(&block.x_v);
        let attn = multi_head_attention(q.view(), k.view(), v.view(), self.config.heads, None)?;
        let res = (h.nrows() as f64).sqrt().round() as usize;
        let site = AttentionSite {
            layer_index: b,
            kind: AttentionKind::CrossAttention,
            resolution: res,
            branch: controller.as_ref().map_or(Branch::Target, |c| c.branch()),
        };
        let out = consult(controller, &site, &q, &k, &v, self.config.heads, &attn.probs, attn.output)?;
        Ok(out.dot(&block.x_out))
    }

    fn cross_queries(&self, b: usize, h: &Array2<T>, objectness: &Array1<T>) -> Array2<T> {
        let mut q = h.dot(&self.blocks[b].x_q);
        for (mut row, &o) in q.rows_mut().into_iter().zip(objectness) {
            row.scaled_add(o, &self.ground_dir);
        }
        q
    }

    /// Per-token foreground score in `[0, 1]` for each block's grid: colour
    /// distance of the pooled latent from its mean border colour,
    /// max-normalized.
    fn objectness(&self, latent: &Array3<T>) -> Vec<Array1<T>> {
        let mut by_divisor: Vec<(usize, Array1<T>)> = Vec::new();
        BLOCK_DIVISORS
            .iter()
            .map(|&d| {
                if let Some((_, o)) = by_divisor.iter().find(|(k, _)| *k == d) {
                    return o.clone();
                }
                let o = objectness_map(&pool_tokens(latent, d));
                by_divisor.push((d, o.clone()));
                o
            })
            .collect()
    }

    fn check_embedding(&self, cond: &TextEmbedding<T>) -> Result<()> {
        let want = (self.config.sequence_length, self.config.embed_dim);
        if cond.embedding.dim() != want {
            return Err(Error::invalid(format!(
                "embedding shape {:?}, expected {want:?}",
                cond.embedding.dim()
            )));
        }
        Ok(())
    }

    fn residual_weight(&self, gain: f64) -> T {
        T::of(gain / self.blocks.len() as f64)
    }
}

fn consult<T: Scalar>(
    controller: &mut Option<&mut dyn AttentionController<T>>,
    site: &AttentionSite,
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    heads: usize,
    probs: &[Array2<T>],
    raw: Array2<T>,
) -> Result<Array2<T>> {
    let Some(ctrl) = controller.as_deref_mut() else {
        return Ok(raw);
    };
    let call = AttentionCall {
        query: q.view(),
        key: k.view(),
        value: v.view(),
        heads,
        probs,
        output: raw.view(),
    };
    match ctrl.attend(site, &call)? {
        None => Ok(raw),
        Some(replaced) => {
            if replaced.dim() != raw.dim() {
                return Err(Error::Internal(format!(
                    "controller returned {:?} at {site:?}, expected {:?}",
                    replaced.dim(),
                    raw.dim()
                )));
            }
            Ok(replaced)
        }
    }
}

fn objectness_map<T: Scalar>(pooled: &Array2<T>) -> Array1<T> {
    let res = (pooled.nrows() as f64).sqrt().round() as usize;
    let mut border = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..res {
        for x in 0..res {
            if y == 0 || x == 0 || y + 1 == res || x + 1 == res {
                for (c, acc) in border.iter_mut().enumerate() {
                    *acc += pooled[[y * res + x, c]].as_f64();
                }
                count += 1;
            }
        }
    }
    border.iter_mut().for_each(|v| *v /= count.max(1) as f64);
    let dist: Vec<f64> = pooled
        .rows()
        .into_iter()
        .map(|row| {
            (0..3)
                .map(|c| (row[c].as_f64() - border[c]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max = dist.iter().cloned().fold(0.0, f64::max);
    Array1::from_iter(dist.iter().map(|&d| T::of(if max > 0.0 { d / max } else { 0.0 })))
}

/// `(C, S, S)` → `(r*r, C)` tokens by `divisor`-sized average pooling.
fn pool_tokens<T: Scalar>(latent: &Array3<T>, divisor: usize) -> Array2<T> {
    let (c, side, _) = latent.dim();
    let res = side / divisor;
    let norm = T::of(1.0 / (divisor * divisor) as f64);
    let mut out = Array2::zeros((res * res, c));
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                out[[(y / divisor) * res + x / divisor, ch]] += latent[[ch, y, x]];
            }
        }
    }
    out.mapv_inplace(|v| v * norm);
    out
}

/// Resizes a square token grid: average pooling down, nearest neighbour up.
fn resize_tokens<T: Scalar>(tokens: &Array2<T>, res: usize) -> Array2<T> {
    let from = (tokens.nrows() as f64).sqrt().round() as usize;
    if from == res {
        return tokens.clone();
    }
    let cols = tokens.ncols();
    let mut out = Array2::zeros((res * res, cols));
    if from > res {
        let f = from / res;
        let norm = T::of(1.0 / (f * f) as f64);
        for y in 0..from {
            for x in 0..from {
                let mut row = out.row_mut((y / f) * res + x / f);
                row.scaled_add(norm, &tokens.row(y * from + x));
            }
        }
    } else {
        let f = res / from;
        for y in 0..res {
            for x in 0..res {
                out.row_mut(y * res + x)
                    .assign(&tokens.row((y / f) * from + x / f));
            }
        }
    }
    out
}

/// Adds `weight * tokens` (`(r*r, C)`) to `acc` (`(C, S, S)`) with nearest upsampling.
fn splat_tokens<T: Scalar>(acc: &mut Array3<T>, tokens: &Array2<T>, weight: T) {
    let (c, side, _) = acc.dim();
    let res = (tokens.nrows() as f64).sqrt().round() as usize;
    let f = side / res;
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                acc[[ch, y, x]] += weight * tokens[[(y / f) * res + x / f, ch]];
            }
        }
    }
}

/// Adjoint of [`splat_tokens`] with unit weight: sum pooling to tokens.
fn gather_tokens<T: Scalar>(grad: &Array3<T>, res: usize) -> Array2<T> {
    let (c, side, _) = grad.dim();
    let f = side / res;
    let mut out = Array2::zeros((res * res, c));
    for ch in 0..c {
        for y in 0..side {
            for x in 0..side {
                out[[(y / f) * res + x / f, ch]] += grad[[ch, y, x]];
            }
        }
    }
    out
}

/// Bilinear (half-pixel centred, edge clamped) upsampling matrix `(n*f, n)`.
fn bilinear_matrix(n: usize, f: usize) -> Array2<f64> {
    let big = n * f;
    let mut m = Array2::zeros((big, n));
    for i in 0..big {
        let pos = ((i as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        let frac = pos - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

/// Least-squares left inverse `(UᵀU)⁻¹Uᵀ` of a bilinear upsampler.
fn bilinear_pinv(up: &Array2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = up.dim();
    let u = nalgebra::DMatrix::from_fn(rows, cols, |i, j| up[[i, j]]);
    let gram = u.transpose() * &u;
    let inv = gram
        .try_inverse()
        .ok_or_else(|| Error::Internal("singular autoencoder gram matrix".into()))?;
    let p = inv * u.transpose();
    Ok(Array2::from_shape_fn((cols, rows), |(i, j)| p[(i, j)]))
}

impl<T: Scalar> NoisePredictor<T> for ReferenceBackbone<T> {
    fn predict_noise(
        &self,
        latent: &LatentImage<T>,
        t: usize,
        cond: &TextEmbedding<T>,
        mut controller: Option<&mut dyn AttentionController<T>>,
    ) -> Result<Array3<T>> {
        self.check_latent(latent, t)?;
        self.check_embedding(cond)?;
        let temb = self.time_embedding(t);
        // text-independent and text-dependent parts are accumulated apart so
        // the frozen path reproduces this result bit for bit
        let mut base = self.prior_noise(&latent.data, t);
        let mut text = Array3::zeros(base.dim());
        let (ws, wx) = (
            self.residual_weight(self.config.self_attention_gain),
            self.residual_weight(self.config.cross_attention_gain),
        );
        let objectness = self.objectness(&latent.data);
        let mut carry: Option<Array2<T>> = None;
        for b in 0..self.blocks.len() {
            let h = self.self_block(b, &latent.data, &temb, carry.as_ref(), &mut controller)?;
            splat_tokens(&mut base, &h.dot(&self.blocks[b].w_eps), ws);
            let x = self.cross_block(b, &h, &objectness[b], cond, &mut controller)?;
            splat_tokens(&mut text, &x, wx);
            carry = Some(h);
        }
        let eps = base + text;
        ensure_finite(&eps, "noise prediction")?;
        Ok(eps)
    }

    fn freeze<'a>(
        &'a self,
        latent: &LatentImage<T>,
        t: usize,
    ) -> Result<Box<dyn FrozenPredictor<T> + 'a>> {
        self.check_latent(latent, t)?;
        let temb = self.time_embedding(t);
        let mut base = self.prior_noise(&latent.data, t);
        let ws = self.residual_weight(self.config.self_attention_gain);
        let mut states = Vec::with_capacity(self.blocks.len());
        let mut none = None;
        for b in 0..self.blocks.len() {
            let h = self.self_block(b, &latent.data, &temb, states.last(), &mut none)?;
            splat_tokens(&mut base, &h.dot(&self.blocks[b].w_eps), ws);
            states.push(h);
        }
        Ok(Box::new(FrozenReference {
            model: self,
            base,
            objectness: self.objectness(&latent.data),
            states,
        }))
    }
}

struct FrozenReference<'a, T> {
    model: &'a ReferenceBackbone<T>,
    base: Array3<T>,
    objectness: Vec<Array1<T>>,
    states: Vec<Array2<T>>,
}

impl<T: Scalar> FrozenPredictor<T> for FrozenReference<'_, T> {
    fn noise(&self, cond: &TextEmbedding<T>) -> Result<Array3<T>> {
        self.model.check_embedding(cond)?;
        let wx = self.model.residual_weight(self.model.config.cross_attention_gain);
        let mut text = Array3::zeros(self.base.dim());
        let mut none = None;
        for (b, h) in self.states.iter().enumerate() {
            let x = self.model.cross_block(b, h, &self.objectness[b], cond, &mut none)?;
            splat_tokens(&mut text, &x, wx);
        }
        let eps = &self.base + &text;
        ensure_finite(&eps, "noise prediction")?;
        Ok(eps)
    }

    fn embedding_vjp(&self, cond: &TextEmbedding<T>, upstream: &Array3<T>) -> Result<Array2<T>> {
        self.model.check_embedding(cond)?;
        if upstream.dim() != self.base.dim() {
            return Err(Error::invalid("upstream gradient shape mismatch"));
        }
        let wx = self.model.residual_weight(self.model.config.cross_attention_gain);
        let heads = self.model.config.heads;
        let mut grad = Array2::zeros(cond.embedding.dim());
        for (b, (block, h)) in self.model.blocks.iter().zip(&self.states).enumerate() {
            let res = (h.nrows() as f64).sqrt().round() as usize;
            let g_tokens = gather_tokens(upstream, res).mapv(|v| v * wx);
            let d_out = g_tokens.dot(&block.x_out.t());
            let q = self.model.cross_queries(b, h, &self.objectness[b]);
            let k = cond.embedding.dot(&block.x_k);
            let v = cond.embedding.dot(&block.x_v);
            let fwd = multi_head_attention(q.view(), k.view(), v.view(), heads, None)?;
            let (d_k, d_v) = attention_kv_backward(q.view(), v.view(), &fwd.probs, d_out.view());
            grad += &d_k.dot(&block.x_k.t());
            grad += &d_v.dot(&block.x_v.t());
        }
        Ok(grad)
    }
}

impl<T: Scalar> Backbone<T> for ReferenceBackbone<T> {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn training_alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn encode_text(&self, prompt: &str) -> TextEmbedding<T> {
        let prompt_text = if prompt.trim().is_empty() {
            String::new()
        } else {
            prompt.to_string()
        };
        let tok = tokenize(&prompt_text, self.config.sequence_length, self.config.vocab_size);
        let emb = self.config.embed_dim;
        let n = tok.ids.len();
        let mut raw = Array2::<T>::zeros((n, emb));
        for (i, &id) in tok.ids.iter().enumerate() {
            let mut row = raw.row_mut(i);
            row.assign(&self.token_table.row(id as usize));
            row += &self.positions.row(i);
        }
        // causal running mean mixes sentence context into later positions
        let mut out = Array2::<T>::zeros((n, emb));
        let mut running = Array1::<T>::zeros(emb);
        for i in 0..n {
            running += &raw.row(i);
            let ctx = running.mapv(|v| v / T::of((i + 1) as f64));
            let mut row = out.row_mut(i);
            row.assign(&raw.row(i));
            row.scaled_add(T::of(0.5), &ctx);
            let mean = row.sum() / T::of(emb as f64);
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / T::of(emb as f64);
            let inv = T::one() / (var + T::of(1e-5)).sqrt();
            row.mapv_inplace(|v| v * inv);
        }
        // last feature marks content words; grounded keys read it
        out.column_mut(emb - 1).fill(T::zero());
        if !prompt_text.is_empty() {
            for i in content_token_indices(&prompt_text, self.config.sequence_length) {
                out[[i, emb - 1]] = T::one();
            }
        }
        TextEmbedding {
            tokens: tok.ids,
            embedding: out,
            is_null: prompt_text.is_empty(),
            prompt_text,
        }
    }

    fn encode_image(&self, image: &PixelImage<T>) -> Result<LatentImage<T>> {
        let (h, w) = (image.height(), image.width());
        let f = DOWNSAMPLE_FACTOR;
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!(
                "image {w}x{h} is not a multiple of the {f}x downsampling factor"
            )));
        }
        let (lh, lw) = (h / f, w / f);
        let ph = bilinear_pinv(&bilinear_matrix(lh, f))?.mapv(T::of);
        let pw = bilinear_pinv(&bilinear_matrix(lw, f))?.mapv(T::of);
        let mut data = Array3::zeros((LATENT_CHANNELS, lh, lw));
        for c in 0..3 {
            let x = image
                .data()
                .index_axis(Axis(0), c)
                .mapv(|v| v * T::of(2.0) - T::one());
            data.slice_mut(s![c, .., ..]).assign(&ph.dot(&x).dot(&pw.t()));
        }
        // fourth channel: local luminance contrast per latent cell
        let lum = image.luminance();
        for y in 0..lh {
            for x in 0..lw {
                let cell = lum.slice(s![y * f..(y + 1) * f, x * f..(x + 1) * f]);
                let n = T::of((f * f) as f64);
                let mean = cell.sum() / n;
                let var = cell.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                data[[3, y, x]] = T::of(4.0) * var.sqrt() - T::of(0.25);
            }
        }
        Ok(LatentImage::new(data, h, w))
    }

    fn decode_latent(&self, latent: &LatentImage<T>) -> Result<PixelImage<T>> {
        let (c, lh, lw) = latent.data.dim();
        let f = DOWNSAMPLE_FACTOR;
        if c != LATENT_CHANNELS || lh * f != latent.pixel_height || lw * f != latent.pixel_width {
            return Err(Error::invalid(format!(
                "latent {:?} inconsistent with pixel size {}x{}",
                latent.data.dim(),
                latent.pixel_width,
                latent.pixel_height
            )));
        }
        if !latent.is_finite() {
            return Err(Error::numerical(None, "decoding non-finite latent"));
        }
        let uh = bilinear_matrix(lh, f).mapv(T::of);
        let uw = bilinear_matrix(lw, f).mapv(T::of);
        let mut data = Array3::zeros((3, lh * f, lw * f));
        for ch in 0..3 {
            let z: ArrayView2<T> = latent.data.slice(s![ch, .., ..]);
            let x = uh.dot(&z).dot(&uw.t());
            data.slice_mut(s![ch, .., ..])
                .assign(&x.mapv(|v| ((v + T::one()) * T::of(0.5)).max(T::zero()).min(T::one())));
        }
        PixelImage::new(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PassThrough;

    fn small() -> ReferenceBackbone<f64> {
        ReferenceBackbone::new(ReferenceConfig::at_resolution(128)).unwrap()
    }

    fn test_latent(model: &ReferenceBackbone<f64>) -> LatentImage<f64> {
        let img = PixelImage::from_fn(128, 128, |y, x| {
            [
                0.5 + 0.4 * ((y as f64) / 20.0).sin(),
                x as f64 / 128.0,
                0.3,
            ]
        });
        model.encode_image(&img).unwrap()
    }

    #[test]
    fn latent_dims_follow_downsampling() {
        let model = ReferenceBackbone::<f32>::new(ReferenceConfig::default()).unwrap();
        let img = PixelImage::<f32>::zeros(512, 512);
        let lat = model.encode_image(&img).unwrap();
        assert_eq!(lat.data.dim(), (4, 64, 64));
        assert!(matches!(
            model.encode_image(&PixelImage::zeros(500, 500)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn decode_inverts_encode_on_decoder_range() {
        let model = small();
        let lat = test_latent(&model);
        let img = model.decode_latent(&lat).unwrap();
        let again = model.decode_latent(&model.encode_image(&img).unwrap()).unwrap();
        assert!(crate::image::psnr(&img, &again).unwrap() > 60.0);
    }

    #[test]
    fn text_encoding_is_deterministic_and_flags_null() {
        let model = small();
        let a = model.encode_text("a photo of a bag");
        let b = model.encode_text("a photo of a bag");
        assert_eq!(a, b);
        assert_eq!(a.embedding.dim(), (77, 32));
        assert!(!a.is_null);
        let null = model.encode_text("");
        assert!(null.is_null && null.prompt_text.is_empty());
        assert_eq!(null.embedding.nrows(), 77);
    }

    #[test]
    fn pass_through_controller_is_neutral() {
        let model = small();
        let lat = test_latent(&model);
        let cond = model.encode_text("a red bag");
        let plain = model.predict_noise(&lat, 501, &cond, None).unwrap();
        let mut pass = PassThrough;
        let hooked = model.predict_noise(&lat, 501, &cond, Some(&mut pass)).unwrap();
        assert_eq!(plain, hooked);
        assert_eq!(plain.dim(), lat.data.dim());
    }

    #[test]
    fn frozen_predictor_matches_full_forward() {
        let model = small();
        let lat = test_latent(&model);
        let cond = model.encode_text("a wooden lamp");
        let full = model.predict_noise(&lat, 241, &cond, None).unwrap();
        let frozen = model.freeze(&lat, 241).unwrap();
        let fast = frozen.noise(&cond).unwrap();
        assert_eq!(full, fast);
    }

    #[test]
    fn embedding_vjp_matches_finite_differences() {
        let model = small();
        let lat = test_latent(&model);
        let cond = model.encode_text("a leather bag");
        let frozen = model.freeze(&lat, 601).unwrap();
        let upstream = lat.data.mapv(|v| (v * 3.0).sin());
        let grad = frozen.embedding_vjp(&cond, &upstream).unwrap();
        let objective = |e: &TextEmbedding<f64>| (&frozen.noise(e).unwrap() * &upstream).sum();
        let h = 1e-5;
        for &(i, j) in &[(0usize, 0usize), (3, 7), (10, 31), (76, 5)] {
            let mut plus = cond.clone();
            plus.embedding[[i, j]] += h;
            let mut minus = cond.clone();
            minus.embedding[[i, j]] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (fd - grad[[i, j]]).abs();
            assert!(err < 1e-7 * (1.0 + fd.abs()), "({i},{j}) fd {fd} vjp {}", grad[[i, j]]);
        }
    }

    #[test]
    fn sites_are_visited_in_traversal_order() {
        struct Recorder(Vec<(usize, AttentionKind, usize)>);
        impl AttentionController<f64> for Recorder {
            fn attend(
                &mut self,
                site: &AttentionSite,
                _: &AttentionCall<'_, f64>,
            ) -> Result<Option<Array2<f64>>> {
                self.0.push((site.layer_index, site.kind, site.resolution));
                Ok(None)
            }
        }
        let model = small();
        let lat = test_latent(&model);
        let cond = model.encode_text("x");
        let mut rec = Recorder(Vec::new());
        model.predict_noise(&lat, 1, &cond, Some(&mut rec)).unwrap();
        assert_eq!(rec.0.len(), 32);
        assert_eq!(rec.0[0], (0, AttentionKind::SelfAttention, 4));
        assert_eq!(rec.0[1], (0, AttentionKind::CrossAttention, 4));
        assert_eq!(rec.0[20], (10, AttentionKind::SelfAttention, 2));
    }
}

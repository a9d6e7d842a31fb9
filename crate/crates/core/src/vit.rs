//! Minimal frozen Vision Transformer with attention capture.
//!
//! The forward pass follows the CLIP visual tower: patch projection without
//! bias, class token, learned positional embedding, pre-layernorm, pre-norm
//! residual blocks, final layernorm on every token and a linear projection
//! into the joint space.
//!
//! Besides the forward pass this module owns the "tail" of the network: the
//! map from the last block's attention probabilities `A` to the mean projected
//! token `zbar`. Its reverse-mode product ([`Model::tail_vjp`]) and
//! forward-mode product ([`Model::tail_jvp`]) are replayed from the cache kept
//! in [`EncoderActivations`]; [`Model::tail_jacobian`] materializes the full
//! `heads × n × n × joint_dim` tensor.
//!
//! # Weight keys
//!
//! | key | shape |
//! |-----|-------|
//! | `patch_embed.weight` | `[width, 3, patch, patch]` |
//! | `cls_token` | `[width]` |
//! | `pos_embed` | `[n, width]` |
//! | `ln_pre.{weight,bias}` | `[width]` |
//! | `blocks.{i}.ln1.{weight,bias}` | `[width]` |
//! | `blocks.{i}.attn.qkv.weight` | `[3*width, width]` |
//! | `blocks.{i}.attn.qkv.bias` | `[3*width]` |
//! | `blocks.{i}.attn.out.weight` | `[width, width]` |
//! | `blocks.{i}.attn.out.bias` | `[width]` |
//! | `blocks.{i}.ln2.{weight,bias}` | `[width]` |
//! | `blocks.{i}.mlp.fc1.weight` | `[mlp, width]` |
//! | `blocks.{i}.mlp.fc1.bias` | `[mlp]` |
//! | `blocks.{i}.mlp.fc2.weight` | `[width, mlp]` |
//! | `blocks.{i}.mlp.fc2.bias` | `[width]` |
//! | `ln_final.{weight,bias}` | `[width]` |
//! | `proj` | `[width, joint_dim]` |
//!
//! Linear weights are stored `[out, in]` (`y = x W^T + b`); `proj` is stored
//! `[in, out]` (`z = y P`), matching OpenAI CLIP checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{self, RawTensor};
use crate::error::{arg, Error, Result};
use crate::real::{gemm, Op, Real};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `x * sigmoid(1.702 x)`, used by OpenAI CLIP.
    #[default]
    QuickGelu,
    /// tanh approximation of GELU.
    GeluTanh,
}

impl Activation {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::QuickGelu => x * sigmoid(T::lit(1.702) * x),
            Activation::GeluTanh => {
                let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let t = (c * (x + T::lit(0.044715) * x * x * x)).tanh();
                T::lit(0.5) * x * (T::one() + t)
            }
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::QuickGelu => {
                let k = T::lit(1.702);
                let s = sigmoid(k * x);
                s + k * x * s * (T::one() - s)
            }
            Activation::GeluTanh => {
                let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
                let b = T::lit(0.044715);
                let t = (c * (x + b * x * x * x)).tanh();
                let half = T::lit(0.5);
                half * (T::one() + t)
                    + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * b * x * x)
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Architecture hyperparameters. Mirrored 1:1 by the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub joint_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub mlp_ratio: f64,
    pub layernorm_eps: f64,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    /// 2 layers, 2 heads, width 32, joint dim 16, 16px input in 4px patches (17 tokens).
    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 2,
            width: 32,
            joint_dim: 16,
            patch_size: 4,
            image_size: 16,
            mlp_ratio: 4.0,
            layernorm_eps: 1e-5,
            activation: Activation::QuickGelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("width", self.width),
            ("joint_dim", self.joint_dim),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return arg(format!("model config: {name} must be at least 1"));
            }
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return arg(format!(
                "model config: image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !self.width.is_multiple_of(self.heads) {
            return arg(format!(
                "model config: width {} not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_width() == 0 {
            return arg("model config: mlp_ratio must be positive");
        }
        if !(self.layernorm_eps > 0.0) {
            return arg("model config: layernorm_eps must be positive");
        }
        Ok(())
    }

    /// Side length of the patch grid.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count including the class token.
    pub fn tokens(&self) -> usize {
        1 + self.grid() * self.grid()
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_width(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Preprocessed input image, channel-major `3 × size × size`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(size: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != 3 * size * size {
            return arg(format!(
                "image tensor of side {size} needs {} values, got {}",
                3 * size * size,
                data.len()
            ));
        }
        Ok(Self { size, data })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.size + y) * self.size + x]
    }
}

#[derive(Clone, Debug)]
struct Block<T> {
    ln1_w: Vec<T>,
    ln1_b: Vec<T>,
    qkv_w: Vec<T>,
    qkv_b: Vec<T>,
    out_w: Vec<T>,
    out_b: Vec<T>,
    ln2_w: Vec<T>,
    ln2_b: Vec<T>,
    fc1_w: Vec<T>,
    fc1_b: Vec<T>,
    fc2_w: Vec<T>,
    fc2_b: Vec<T>,
}

/// Frozen encoder. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    id: u64,
    patch_w: Vec<T>,
    cls_token: Vec<T>,
    pos_embed: Vec<T>,
    ln_pre_w: Vec<T>,
    ln_pre_b: Vec<T>,
    blocks: Vec<Block<T>>,
    ln_final_w: Vec<T>,
    ln_final_b: Vec<T>,
    proj: Vec<T>,
}

/// Scales used by [`Model::random`].
#[derive(Clone, Debug, PartialEq)]
pub struct RandomInit {
    pub cls_std: f64,
    pub pos_std: f64,
    /// Spread of layernorm gains around 1.
    pub ln_gain_std: f64,
    pub bias_std: f64,
    /// Multiplier on the `1/sqrt(fan_in)` standard deviation of linear layers.
    pub linear_gain: f64,
    /// Extra multiplier on the MLP layers.
    pub mlp_gain: f64,
    /// Added to the diagonals of the value and output projections.
    pub value_identity: f64,
}

impl Default for RandomInit {
    fn default() -> Self {
        Self {
            cls_std: 0.5,
            pos_std: 0.1,
            ln_gain_std: 0.1,
            bias_std: 0.05,
            linear_gain: 1.0,
            mlp_gain: 1.0,
            value_identity: 0.0,
        }
    }
}

/// Outputs of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderActivations<T> {
    /// Per layer, `heads × n × n` attention probabilities.
    pub attn: Vec<Vec<T>>,
    /// `n × joint_dim` projected tokens, class token first.
    pub tokens: Vec<T>,
    /// Projected class token.
    pub cls: Vec<T>,
    /// Mean of all projected tokens.
    pub zbar: Vec<T>,
    tail: TailCache<T>,
    model_id: u64,
}

impl<T: Real> EncoderActivations<T> {
    pub fn last_attn(&self) -> &[T] {
        self.attn.last().expect("at least one layer")
    }

    pub fn model_id(&self) -> u64 {
        self.model_id
    }
}

/// Everything needed to replay the last block from its attention map onward.
#[derive(Clone, Debug)]
struct TailCache<T> {
    /// Residual stream entering the last block, `n × width`.
    x_in: Vec<T>,
    /// Value vectors of the last block, `heads × n × head_dim`.
    v_heads: Vec<T>,
    rest: BlockRest<T>,
    final_norm: NormCache<T>,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

#[derive(Clone, Debug)]
struct BlockRest<T> {
    ln2: NormCache<T>,
    fc1_pre: Vec<T>,
    x2: Vec<T>,
}

/// `∂zbar/∂A` for the last layer, laid out `[head][query][key][k]`.
#[derive(Clone, Debug)]
pub struct TailJacobian<T> {
    heads: usize,
    tokens: usize,
    joint_dim: usize,
    values: Vec<T>,
}

impl<T: Real> TailJacobian<T> {
    /// Wraps an explicit tensor; `values.len()` must be `heads·n·n·joint_dim`.
    pub fn from_values(
        heads: usize,
        tokens: usize,
        joint_dim: usize,
        values: Vec<T>,
    ) -> Result<Self> {
        if values.len() != heads * tokens * tokens * joint_dim {
            return arg(format!(
                "tail jacobian {heads}x{tokens}x{tokens}x{joint_dim} needs {} values, got {}",
                heads * tokens * tokens * joint_dim,
                values.len()
            ));
        }
        Ok(Self {
            heads,
            tokens,
            joint_dim,
            values,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn joint_dim(&self) -> usize {
        self.joint_dim
    }

    /// Number of attention entries, `heads·n·n`.
    pub fn attn_len(&self) -> usize {
        self.heads * self.tokens * self.tokens
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn get(&self, h: usize, i: usize, j: usize, k: usize) -> T {
        self.values[((h * self.tokens + i) * self.tokens + j) * self.joint_dim + k]
    }
}

fn layer_norm<T: Real>(x: &[T], rows: usize, w: &[T], b: &[T], eps: T) -> (Vec<T>, NormCache<T>) {
    let width = w.len();
    let mut y = vec![T::zero(); rows * width];
    let mut xhat = vec![T::zero(); rows * width];
    let mut rstd = vec![T::zero(); rows];
    let inv_w = T::one() / T::from_usize(width).unwrap();
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<T>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..width {
            let xh = (row[c] - mean) * rs;
            xhat[r * width + c] = xh;
            y[r * width + c] = xh * w[c] + b[c];
        }
    }
    (y, NormCache { xhat, rstd })
}

/// Shared linearization of layernorm. For a tangent this maps `dx` to
/// `d xhat`; for a cotangent it maps `d xhat` to `dx`. The operator is
/// self-adjoint, so both directions use the same formula.
fn layer_norm_linear<T: Real>(cache: &NormCache<T>, d: &[T], width: usize) -> Vec<T> {
    let rows = cache.rstd.len();
    let inv_w = T::one() / T::from_usize(width).unwrap();
    let mut out = vec![T::zero(); rows * width];
    for r in 0..rows {
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let dr = &d[r * width..(r + 1) * width];
        let mean_d = dr.iter().copied().sum::<T>() * inv_w;
        let mean_dx = xh.iter().zip(dr).map(|(&a, &b)| a * b).sum::<T>() * inv_w;
        let rs = cache.rstd[r];
        for c in 0..width {
            out[r * width + c] = rs * (dr[c] - mean_d - xh[c] * mean_dx);
        }
    }
    out
}

/// `x W^T + b` for `x: rows × in`, `W: out × in`.
fn linear<T: Real>(x: &[T], rows: usize, w: &[T], b: Option<&[T]>, out_dim: usize) -> Vec<T> {
    let in_dim = w.len() / out_dim;
    let mut y = vec![T::zero(); rows * out_dim];
    if let Some(b) = b {
        for r in 0..rows {
            y[r * out_dim..(r + 1) * out_dim].copy_from_slice(b);
        }
        gemm(rows, in_dim, out_dim, x, Op::N, w, Op::T, T::one(), &mut y);
    } else {
        gemm(rows, in_dim, out_dim, x, Op::N, w, Op::T, T::zero(), &mut y);
    }
    y
}

/// `dy W` for `dy: rows × out`, `W: out × in`.
fn linear_back<T: Real>(dy: &[T], rows: usize, w: &[T], in_dim: usize) -> Vec<T> {
    let out_dim = w.len() / in_dim;
    let mut dx = vec![T::zero(); rows * in_dim];
    gemm(
        rows,
        out_dim,
        in_dim,
        dy,
        Op::N,
        w,
        Op::N,
        T::zero(),
        &mut dx,
    );
    dx
}

fn split_heads<T: Real>(x: &[T], rows: usize, width: usize, col0: usize, heads: usize) -> Vec<T> {
    let hd = width / heads;
    let stride = x.len() / rows;
    let mut out = vec![T::zero(); heads * rows * hd];
    for h in 0..heads {
        for r in 0..rows {
            let src = &x[r * stride + col0 + h * hd..r * stride + col0 + (h + 1) * hd];
            out[(h * rows + r) * hd..(h * rows + r + 1) * hd].copy_from_slice(src);
        }
    }
    out
}

fn merge_heads<T: Real>(x: &[T], rows: usize, heads: usize, hd: usize) -> Vec<T> {
    let width = heads * hd;
    let mut out = vec![T::zero(); rows * width];
    for h in 0..heads {
        for r in 0..rows {
            out[r * width + h * hd..r * width + (h + 1) * hd]
                .copy_from_slice(&x[(h * rows + r) * hd..(h * rows + r + 1) * hd]);
        }
    }
    out
}

/// `A_h V_h` for every head; result laid out `heads × n × hd`.
fn attend<T: Real>(attn: &[T], v_heads: &[T], heads: usize, n: usize, hd: usize) -> Vec<T> {
    let mut out = vec![T::zero(); heads * n * hd];
    for h in 0..heads {
        gemm(
            n,
            n,
            hd,
            &attn[h * n * n..(h + 1) * n * n],
            Op::N,
            &v_heads[h * n * hd..(h + 1) * n * hd],
            Op::N,
            T::zero(),
            &mut out[h * n * hd..(h + 1) * n * hd],
        );
    }
    out
}

impl<T: Real> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Identity used to match activations to the model that produced them.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Builds a model from decoded tensors. Every key of the schema must be
    /// present with the shape implied by `config`.
    pub fn from_tensors(
        tensors: &BTreeMap<String, RawTensor>,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let p = config.patch_size;
        let n = config.tokens();
        let m = config.mlp_width();
        let take = |key: &str, shape: &[usize]| -> Result<Vec<T>> {
            let t = tensors
                .get(key)
                .ok_or_else(|| Error::MissingWeight(key.to_string()))?;
            if t.shape != shape {
                return Err(Error::ShapeMismatch {
                    key: key.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape.clone(),
                });
            }
            Ok(t.data.iter().map(|&v| T::lit(v)).collect())
        };
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let k = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(Block {
                ln1_w: take(&k("ln1.weight"), &[w])?,
                ln1_b: take(&k("ln1.bias"), &[w])?,
                qkv_w: take(&k("attn.qkv.weight"), &[3 * w, w])?,
                qkv_b: take(&k("attn.qkv.bias"), &[3 * w])?,
                out_w: take(&k("attn.out.weight"), &[w, w])?,
                out_b: take(&k("attn.out.bias"), &[w])?,
                ln2_w: take(&k("ln2.weight"), &[w])?,
                ln2_b: take(&k("ln2.bias"), &[w])?,
                fc1_w: take(&k("mlp.fc1.weight"), &[m, w])?,
                fc1_b: take(&k("mlp.fc1.bias"), &[m])?,
                fc2_w: take(&k("mlp.fc2.weight"), &[w, m])?,
                fc2_b: take(&k("mlp.fc2.bias"), &[w])?,
            });
        }
        Ok(Self {
            config: config.clone(),
            id: fresh_id(),
            patch_w: take("patch_embed.weight", &[w, 3, p, p])?,
            cls_token: take("cls_token", &[w])?,
            pos_embed: take("pos_embed", &[n, w])?,
            ln_pre_w: take("ln_pre.weight", &[w])?,
            ln_pre_b: take("ln_pre.bias", &[w])?,
            blocks,
            ln_final_w: take("ln_final.weight", &[w])?,
            ln_final_b: take("ln_final.bias", &[w])?,
            proj: take("proj", &[w, config.joint_dim])?,
        })
    }

    /// Loads a weight container. A positional embedding for a different grid
    /// is a shape error.
    pub fn load(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        Self::from_tensors(&container::read(path)?, config)
    }

    /// Like [`Model::load`], but a square positional grid of another size is
    /// bicubically resampled to `config.image_size`.
    pub fn load_resampled(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Self> {
        let tensors = container::read(path)?;
        Self::from_tensors_resampled(&tensors, config)
    }

    pub fn from_tensors_resampled(
        tensors: &BTreeMap<String, RawTensor>,
        config: &ModelConfig,
    ) -> Result<Self> {
        config.validate()?;
        let pos = tensors
            .get("pos_embed")
            .ok_or_else(|| Error::MissingWeight("pos_embed".into()))?;
        if pos.shape.len() != 2 || pos.shape[0] == config.tokens() {
            return Self::from_tensors(tensors, config);
        }
        let patches = pos.shape[0].saturating_sub(1);
        let side = (patches as f64).sqrt().round() as usize;
        if side == 0 || side * side != patches {
            return Err(Error::Load(format!(
                "pos_embed has {} rows, not 1 + a square grid",
                pos.shape[0]
            )));
        }
        let native = ModelConfig {
            image_size: side * config.patch_size,
            ..config.clone()
        };
        Self::from_tensors(tensors, &native)?.resample_pos_embed(config.image_size)
    }

    /// Serializes into the container key schema (single precision).
    pub fn to_container_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let (w, p, m) = (c.width, c.patch_size, c.mlp_width());
        let f = |v: &[T]| v.iter().map(|x| x.as_f64() as f32).collect::<Vec<f32>>();
        let mut entries: Vec<(String, Vec<usize>, Vec<f32>)> = vec![
            (
                "patch_embed.weight".into(),
                vec![w, 3, p, p],
                f(&self.patch_w),
            ),
            ("cls_token".into(), vec![w], f(&self.cls_token)),
            ("pos_embed".into(), vec![c.tokens(), w], f(&self.pos_embed)),
            ("ln_pre.weight".into(), vec![w], f(&self.ln_pre_w)),
            ("ln_pre.bias".into(), vec![w], f(&self.ln_pre_b)),
            ("ln_final.weight".into(), vec![w], f(&self.ln_final_w)),
            ("ln_final.bias".into(), vec![w], f(&self.ln_final_b)),
            ("proj".into(), vec![w, c.joint_dim], f(&self.proj)),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let k = |s: &str| format!("blocks.{i}.{s}");
            entries.extend([
                (k("ln1.weight"), vec![w], f(&b.ln1_w)),
                (k("ln1.bias"), vec![w], f(&b.ln1_b)),
                (k("attn.qkv.weight"), vec![3 * w, w], f(&b.qkv_w)),
                (k("attn.qkv.bias"), vec![3 * w], f(&b.qkv_b)),
                (k("attn.out.weight"), vec![w, w], f(&b.out_w)),
                (k("attn.out.bias"), vec![w], f(&b.out_b)),
                (k("ln2.weight"), vec![w], f(&b.ln2_w)),
                (k("ln2.bias"), vec![w], f(&b.ln2_b)),
                (k("mlp.fc1.weight"), vec![m, w], f(&b.fc1_w)),
                (k("mlp.fc1.bias"), vec![m], f(&b.fc1_b)),
                (k("mlp.fc2.weight"), vec![w, m], f(&b.fc2_w)),
                (k("mlp.fc2.bias"), vec![w], f(&b.fc2_b)),
            ]);
        }
        container::serialize(
            entries
                .iter()
                .map(|(k, s, d)| (k.as_str(), s.as_slice(), d.as_slice())),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_container_bytes())?;
        Ok(())
    }

    /// Deterministic random weights, for tests and synthetic fixtures.
    pub fn random(config: &ModelConfig, seed: u64, init: &RandomInit) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize, mean: f64, std: f64| -> Vec<T> {
            if std == 0.0 {
                return vec![T::lit(mean); len];
            }
            let dist = Normal::new(mean, std).expect("finite std");
            (0..len).map(|_| T::lit(dist.sample(&mut rng))).collect()
        };
        let w = config.width;
        let p = config.patch_size;
        let m = config.mlp_width();
        let g = init.linear_gain;
        let fan = |fan_in: usize| g / (fan_in as f64).sqrt();
        let patch_w = draw(w * 3 * p * p, 0.0, fan(3 * p * p));
        let cls_token = draw(w, 0.0, init.cls_std);
        let pos_embed = draw(config.tokens() * w, 0.0, init.pos_std);
        let ln_pre_w = draw(w, 1.0, init.ln_gain_std);
        let ln_pre_b = draw(w, 0.0, init.bias_std);
        let mut blocks = Vec::with_capacity(config.layers);
        let mg = init.mlp_gain;
        for _ in 0..config.layers {
            let mut block = Block {
                ln1_w: draw(w, 1.0, init.ln_gain_std),
                ln1_b: draw(w, 0.0, init.bias_std),
                qkv_w: draw(3 * w * w, 0.0, fan(w)),
                qkv_b: draw(3 * w, 0.0, init.bias_std),
                out_w: draw(w * w, 0.0, fan(w)),
                out_b: draw(w, 0.0, init.bias_std),
                ln2_w: draw(w, 1.0, init.ln_gain_std),
                ln2_b: draw(w, 0.0, init.bias_std),
                fc1_w: draw(m * w, 0.0, mg * fan(w)),
                fc1_b: draw(m, 0.0, init.bias_std),
                fc2_w: draw(w * m, 0.0, mg * fan(m)),
                fc2_b: draw(w, 0.0, init.bias_std),
            };
            for r in 0..w {
                block.qkv_w[(2 * w + r) * w + r] += T::lit(init.value_identity);
                block.out_w[r * w + r] += T::lit(init.value_identity);
            }
            blocks.push(block);
        }
        let ln_final_w = draw(w, 1.0, init.ln_gain_std);
        let ln_final_b = draw(w, 0.0, init.bias_std);
        let proj = draw(w * config.joint_dim, 0.0, fan(w));
        Ok(Self {
            config: config.clone(),
            id: fresh_id(),
            patch_w,
            cls_token,
            pos_embed,
            ln_pre_w,
            ln_pre_b,
            blocks,
            ln_final_w,
            ln_final_b,
            proj,
        })
    }

    /// Converts every weight to another precision. The result is a distinct model.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let c = |v: &[T]| v.iter().map(|x| U::lit(x.as_f64())).collect::<Vec<U>>();
        Model {
            config: self.config.clone(),
            id: fresh_id(),
            patch_w: c(&self.patch_w),
            cls_token: c(&self.cls_token),
            pos_embed: c(&self.pos_embed),
            ln_pre_w: c(&self.ln_pre_w),
            ln_pre_b: c(&self.ln_pre_b),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_w: c(&b.ln1_w),
                    ln1_b: c(&b.ln1_b),
                    qkv_w: c(&b.qkv_w),
                    qkv_b: c(&b.qkv_b),
                    out_w: c(&b.out_w),
                    out_b: c(&b.out_b),
                    ln2_w: c(&b.ln2_w),
                    ln2_b: c(&b.ln2_b),
                    fc1_w: c(&b.fc1_w),
                    fc1_b: c(&b.fc1_b),
                    fc2_w: c(&b.fc2_w),
                    fc2_b: c(&b.fc2_b),
                })
                .collect(),
            ln_final_w: c(&self.ln_final_w),
            ln_final_b: c(&self.ln_final_b),
            proj: c(&self.proj),
        }
    }

    /// Raw positional embedding, `n × width` with the class-token row first.
    pub fn pos_embed(&self) -> &[T] {
        &self.pos_embed
    }

    /// Returns a copy whose patch positional embeddings are bicubically
    /// resampled for `new_image_size`. The class-token row is copied.
    pub fn resample_pos_embed(&self, new_image_size: usize) -> Result<Self> {
        let p = self.config.patch_size;
        if new_image_size == 0 || !new_image_size.is_multiple_of(p) {
            return arg(format!(
                "image size {new_image_size} not divisible by patch size {p}"
            ));
        }
        let w = self.config.width;
        let src = self.config.grid();
        let dst = new_image_size / p;
        let mut pos = vec![T::zero(); (1 + dst * dst) * w];
        pos[..w].copy_from_slice(&self.pos_embed[..w]);
        let mut channel = vec![0.0f64; src * src];
        for c in 0..w {
            for (t, v) in channel.iter_mut().enumerate() {
                *v = self.pos_embed[(1 + t) * w + c].as_f64();
            }
            let out = bicubic_resize(&channel, src, dst);
            for (t, v) in out.into_iter().enumerate() {
                pos[(1 + t) * w + c] = T::lit(v);
            }
        }
        let mut model = self.clone();
        model.config.image_size = new_image_size;
        model.pos_embed = pos;
        model.id = fresh_id();
        Ok(model)
    }

    /// Forward pass capturing every attention map and the last block's replay cache.
    pub fn encode(&self, image: &ImageTensor<T>) -> Result<EncoderActivations<T>> {
        let c = &self.config;
        if image.size != c.image_size || image.data.len() != 3 * c.image_size * c.image_size {
            return arg(format!(
                "image tensor is {}x{}, model expects {}x{}",
                image.size, image.size, c.image_size, c.image_size
            ));
        }
        let (n, w, p, g) = (c.tokens(), c.width, c.patch_size, c.grid());
        let eps = T::lit(c.layernorm_eps);

        let kdim = 3 * p * p;
        let mut patches = vec![T::zero(); (n - 1) * kdim];
        for py in 0..g {
            for px in 0..g {
                let row = &mut patches[(py * g + px) * kdim..(py * g + px + 1) * kdim];
                for ch in 0..3 {
                    for ky in 0..p {
                        for kx in 0..p {
                            row[(ch * p + ky) * p + kx] = image.at(ch, py * p + ky, px * p + kx);
                        }
                    }
                }
            }
        }
        let embedded = linear(&patches, n - 1, &self.patch_w, None, w);
        let mut x = vec![T::zero(); n * w];
        x[..w].copy_from_slice(&self.cls_token);
        x[w..].copy_from_slice(&embedded);
        for (v, &pe) in x.iter_mut().zip(&self.pos_embed) {
            *v += pe;
        }
        let (mut x, _) = layer_norm(&x, n, &self.ln_pre_w, &self.ln_pre_b, eps);

        let mut attn_maps = Vec::with_capacity(c.layers);
        let mut tail = None;
        for (li, block) in self.blocks.iter().enumerate() {
            let (attn, v_heads) = self.attention_probs(block, &x);
            let rest = self.block_rest(block, &x, &attn, &v_heads);
            let x_next = rest.x2.clone();
            if li + 1 == c.layers {
                tail = Some((std::mem::take(&mut x), v_heads, rest));
            }
            attn_maps.push(attn);
            x = x_next;
        }
        let (x_in, v_heads, rest) = tail.expect("at least one layer");
        let (final_norm, tokens) = self.final_projection(&rest.x2);
        let d = c.joint_dim;
        let cls = tokens[..d].to_vec();
        let zbar = mean_rows(&tokens, n, d);
        Ok(EncoderActivations {
            attn: attn_maps,
            tokens,
            cls,
            zbar,
            tail: TailCache {
                x_in,
                v_heads,
                rest,
                final_norm,
            },
            model_id: self.id,
        })
    }

    fn attention_probs(&self, block: &Block<T>, x: &[T]) -> (Vec<T>, Vec<T>) {
        let c = &self.config;
        let (n, w, h, hd) = (c.tokens(), c.width, c.heads, c.head_dim());
        let eps = T::lit(c.layernorm_eps);
        let (normed, _) = layer_norm(x, n, &block.ln1_w, &block.ln1_b, eps);
        let qkv = linear(&normed, n, &block.qkv_w, Some(&block.qkv_b), 3 * w);
        let q = split_heads(&qkv, n, w, 0, h);
        let k = split_heads(&qkv, n, w, w, h);
        let v = split_heads(&qkv, n, w, 2 * w, h);
        let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
        let mut attn = vec![T::zero(); h * n * n];
        for head in 0..h {
            let scores = &mut attn[head * n * n..(head + 1) * n * n];
            gemm(
                n,
                hd,
                n,
                &q[head * n * hd..(head + 1) * n * hd],
                Op::N,
                &k[head * n * hd..(head + 1) * n * hd],
                Op::T,
                T::zero(),
                scores,
            );
            for row in scores.chunks_exact_mut(n) {
                let mut max = T::neg_infinity();
                for s in row.iter_mut() {
                    *s *= scale;
                    if *s > max {
                        max = *s;
                    }
                }
                let mut sum = T::zero();
                for s in row.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
        }
        (attn, v)
    }

    /// Everything in a block downstream of the attention probabilities.
    fn block_rest(&self, block: &Block<T>, x_in: &[T], attn: &[T], v_heads: &[T]) -> BlockRest<T> {
        let c = &self.config;
        let (n, w, h, hd, m) = (c.tokens(), c.width, c.heads, c.head_dim(), c.mlp_width());
        let eps = T::lit(c.layernorm_eps);
        let heads_out = attend(attn, v_heads, h, n, hd);
        let merged = merge_heads(&heads_out, n, h, hd);
        let mut x1 = linear(&merged, n, &block.out_w, Some(&block.out_b), w);
        for (a, &b) in x1.iter_mut().zip(x_in) {
            *a += b;
        }
        let (normed, ln2) = layer_norm(&x1, n, &block.ln2_w, &block.ln2_b, eps);
        let fc1_pre = linear(&normed, n, &block.fc1_w, Some(&block.fc1_b), m);
        let act: Vec<T> = fc1_pre.iter().map(|&v| c.activation.apply(v)).collect();
        let mut x2 = linear(&act, n, &block.fc2_w, Some(&block.fc2_b), w);
        for (a, &b) in x2.iter_mut().zip(&x1) {
            *a += b;
        }
        BlockRest { ln2, fc1_pre, x2 }
    }

    fn final_projection(&self, x: &[T]) -> (NormCache<T>, Vec<T>) {
        let c = &self.config;
        let n = c.tokens();
        let eps = T::lit(c.layernorm_eps);
        let (normed, cache) = layer_norm(x, n, &self.ln_final_w, &self.ln_final_b, eps);
        let mut tokens = vec![T::zero(); n * c.joint_dim];
        gemm(
            n,
            c.width,
            c.joint_dim,
            &normed,
            Op::N,
            &self.proj,
            Op::N,
            T::zero(),
            &mut tokens,
        );
        (cache, tokens)
    }

    fn check_acts(&self, acts: &EncoderActivations<T>) -> Result<()> {
        if acts.model_id != self.id {
            return Err(Error::Usage(format!(
                "activations were produced by model #{}, not model #{}",
                acts.model_id, self.id
            )));
        }
        Ok(())
    }

    /// Recomputes `zbar` with the last layer's attention replaced by `attn`.
    pub fn tail_forward(&self, acts: &EncoderActivations<T>, attn: &[T]) -> Result<Vec<T>> {
        self.check_acts(acts)?;
        let c = &self.config;
        let n = c.tokens();
        if attn.len() != c.heads * n * n {
            return arg(format!(
                "attention tensor needs {} values, got {}",
                c.heads * n * n,
                attn.len()
            ));
        }
        let block = self.blocks.last().expect("at least one layer");
        let rest = self.block_rest(block, &acts.tail.x_in, attn, &acts.tail.v_heads);
        let (_, tokens) = self.final_projection(&rest.x2);
        Ok(mean_rows(&tokens, n, c.joint_dim))
    }

    /// Gradient of `zbar · cotangent` with respect to the last attention map,
    /// `heads × n × n`. Linear in `cotangent`.
    pub fn tail_vjp(&self, acts: &EncoderActivations<T>, cotangent: &[T]) -> Result<Vec<T>> {
        self.check_acts(acts)?;
        let c = &self.config;
        let (n, w, h, hd, m, d) = (
            c.tokens(),
            c.width,
            c.heads,
            c.head_dim(),
            c.mlp_width(),
            c.joint_dim,
        );
        if cotangent.len() != d {
            return arg(format!(
                "cotangent has length {}, expected {d}",
                cotangent.len()
            ));
        }
        let block = self.blocks.last().expect("at least one layer");
        let tail = &acts.tail;

        // zbar = mean_p(y_p P): every token receives P v / n.
        let inv_n = T::one() / T::from_usize(n).unwrap();
        let mut dy_row = vec![T::zero(); w];
        gemm(
            w,
            d,
            1,
            &self.proj,
            Op::N,
            cotangent,
            Op::N,
            T::zero(),
            &mut dy_row,
        );
        let mut dxhat = vec![T::zero(); n * w];
        for row in dxhat.chunks_exact_mut(w) {
            for ((o, &g), &gain) in row.iter_mut().zip(&dy_row).zip(&self.ln_final_w) {
                *o = g * gain * inv_n;
            }
        }
        let dx2 = layer_norm_linear(&tail.final_norm, &dxhat, w);

        // x2 = x1 + fc2(act(fc1(ln2(x1))))
        let mut dact = linear_back(&dx2, n, &block.fc2_w, m);
        for (g, &pre) in dact.iter_mut().zip(&tail.rest.fc1_pre) {
            *g *= c.activation.derivative(pre);
        }
        let mut dnormed = linear_back(&dact, n, &block.fc1_w, w);
        for (g, &gain) in dnormed.iter_mut().zip(block.ln2_w.iter().cycle()) {
            *g *= gain;
        }
        let mut dx1 = layer_norm_linear(&tail.rest.ln2, &dnormed, w);
        for (a, &b) in dx1.iter_mut().zip(&dx2) {
            *a += b;
        }

        // x1 = x_in + merge(A V) W_o^T + b_o
        let dmerged = linear_back(&dx1, n, &block.out_w, w);
        let dheads = split_heads(&dmerged, n, w, 0, h);
        let mut grad = vec![T::zero(); h * n * n];
        for head in 0..h {
            gemm(
                n,
                hd,
                n,
                &dheads[head * n * hd..(head + 1) * n * hd],
                Op::N,
                &tail.v_heads[head * n * hd..(head + 1) * n * hd],
                Op::T,
                T::zero(),
                &mut grad[head * n * n..(head + 1) * n * n],
            );
        }
        Ok(grad)
    }

    /// Directional derivative of `zbar` along a perturbation `direction` of
    /// the last attention map. This is the transpose of [`Model::tail_vjp`]:
    /// `<direction, tail_vjp(v)> == <tail_jvp(direction), v>`.
    pub fn tail_jvp(&self, acts: &EncoderActivations<T>, direction: &[T]) -> Result<Vec<T>> {
        self.check_acts(acts)?;
        let c = &self.config;
        let (n, w, h, hd, m, d) = (
            c.tokens(),
            c.width,
            c.heads,
            c.head_dim(),
            c.mlp_width(),
            c.joint_dim,
        );
        if direction.len() != h * n * n {
            return arg(format!(
                "direction needs {} values, got {}",
                h * n * n,
                direction.len()
            ));
        }
        let block = self.blocks.last().expect("at least one layer");
        let tail = &acts.tail;

        let heads_out = attend(direction, &tail.v_heads, h, n, hd);
        let merged = merge_heads(&heads_out, n, h, hd);
        let dx1 = linear(&merged, n, &block.out_w, None, w);
        let mut dnormed = layer_norm_linear(&tail.rest.ln2, &dx1, w);
        for (g, &gain) in dnormed.iter_mut().zip(block.ln2_w.iter().cycle()) {
            *g *= gain;
        }
        let mut dpre = linear(&dnormed, n, &block.fc1_w, None, m);
        for (g, &pre) in dpre.iter_mut().zip(&tail.rest.fc1_pre) {
            *g *= c.activation.derivative(pre);
        }
        let mut dx2 = linear(&dpre, n, &block.fc2_w, None, w);
        for (a, &b) in dx2.iter_mut().zip(&dx1) {
            *a += b;
        }
        let dxhat = layer_norm_linear(&tail.final_norm, &dx2, w);
        let mut mean_dy = mean_rows(&dxhat, n, w);
        for (g, &gain) in mean_dy.iter_mut().zip(&self.ln_final_w) {
            *g *= gain;
        }
        let mut out = vec![T::zero(); d];
        gemm(
            1,
            w,
            d,
            &mean_dy,
            Op::N,
            &self.proj,
            Op::N,
            T::zero(),
            &mut out,
        );
        Ok(out)
    }

    /// Materializes `∂zbar/∂A` with one basis-cotangent VJP per joint
    /// dimension. Memory is `heads·n²·joint_dim` values.
    pub fn tail_jacobian(&self, acts: &EncoderActivations<T>) -> Result<TailJacobian<T>> {
        self.check_acts(acts)?;
        let c = &self.config;
        let (n, h, d) = (c.tokens(), c.heads, c.joint_dim);
        let len = h * n * n;
        let slices = (0..d)
            .into_par_iter()
            .map(|k| {
                let mut basis = vec![T::zero(); d];
                basis[k] = T::one();
                self.tail_vjp(acts, &basis)
            })
            .collect::<Result<Vec<_>>>()?;
        // Tiled transpose from joint-major slices to the [h][i][j][k] layout.
        const TILE: usize = 256;
        let mut values = vec![T::zero(); len * d];
        for e0 in (0..len).step_by(TILE) {
            let e1 = (e0 + TILE).min(len);
            for (k, slice) in slices.iter().enumerate() {
                for e in e0..e1 {
                    values[e * d + k] = slice[e];
                }
            }
        }
        TailJacobian::from_values(h, n, d, values)
    }
}

fn mean_rows<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); cols];
    for row in x.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let inv = T::one() / T::from_usize(rows).unwrap();
    for o in out.iter_mut() {
        *o *= inv;
    }
    out
}

/// Keys cubic convolution kernel with `a = -0.75`.
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.75;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Half-pixel-centred bicubic resampling of a `src × src` grid to `dst × dst`
/// with clamped borders (the `align_corners = false` convention).
pub(crate) fn bicubic_resize(grid: &[f64], src: usize, dst: usize) -> Vec<f64> {
    let scale = src as f64 / dst as f64;
    let taps: Vec<([usize; 4], [f64; 4])> = (0..dst)
        .map(|o| {
            let x = (o as f64 + 0.5) * scale - 0.5;
            let base = x.floor();
            let t = x - base;
            let mut idx = [0usize; 4];
            let mut wts = [0.0; 4];
            for k in 0..4 {
                let pos = base as i64 - 1 + k as i64;
                idx[k] = pos.clamp(0, src as i64 - 1) as usize;
                wts[k] = cubic_weight(t - (k as f64 - 1.0));
            }
            (idx, wts)
        })
        .collect();
    let mut rows = vec![0.0; src * dst];
    for y in 0..src {
        for (x, (idx, wts)) in taps.iter().enumerate() {
            rows[y * dst + x] = (0..4).map(|k| wts[k] * grid[y * src + idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; dst * dst];
    for (y, (idx, wts)) in taps.iter().enumerate() {
        for x in 0..dst {
            out[y * dst + x] = (0..4).map(|k| wts[k] * rows[idx[k] * dst + x]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_image<T: Real>(cfg: &ModelConfig, seed: u64) -> ImageTensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let s = cfg.image_size;
        ImageTensor::new(
            s,
            (0..3 * s * s)
                .map(|_| T::lit(dist.sample(&mut rng)))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn encode_shapes_on_toy_config() {
        let cfg = ModelConfig::toy();
        let model = Model::<f64>::random(&cfg, 1, &RandomInit::default()).unwrap();
        let acts = model.encode(&toy_image(&cfg, 2)).unwrap();
        assert_eq!(cfg.tokens(), 17);
        assert_eq!(acts.tokens.len(), 17 * 16);
        assert_eq!(acts.attn.len(), 2);
        for a in &acts.attn {
            assert_eq!(a.len(), 2 * 17 * 17);
        }
        assert_eq!(acts.cls, acts.tokens[..16].to_vec());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = ModelConfig::toy();
        let model = Model::<f32>::random(&cfg, 3, &RandomInit::default()).unwrap();
        let acts = model.encode(&toy_image(&cfg, 4)).unwrap();
        for a in &acts.attn {
            for row in a.chunks_exact(17) {
                assert!(row.iter().all(|&p| p >= 0.0));
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() <= 1e-5, "row sum {s}");
            }
        }
    }

    #[test]
    fn zbar_is_token_mean() {
        let cfg = ModelConfig::toy();
        let model = Model::<f64>::random(&cfg, 5, &RandomInit::default()).unwrap();
        let acts = model.encode(&toy_image(&cfg, 6)).unwrap();
        for k in 0..16 {
            let m: f64 = (0..17).map(|p| acts.tokens[p * 16 + k]).sum::<f64>() / 17.0;
            assert!((m - acts.zbar[k]).abs() <= 1e-6);
        }
    }

    #[test]
    fn encode_is_bitwise_deterministic() {
        let cfg = ModelConfig::toy();
        let model = Model::<f32>::random(&cfg, 7, &RandomInit::default()).unwrap();
        let img = toy_image(&cfg, 8);
        let a = model.encode(&img).unwrap();
        let b = model.encode(&img).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.attn, b.attn);
    }

    #[test]
    fn encode_rejects_wrong_image_size() {
        let cfg = ModelConfig::toy();
        let model = Model::<f32>::random(&cfg, 7, &RandomInit::default()).unwrap();
        let img = ImageTensor::new(8, vec![0.0f32; 3 * 64]).unwrap();
        assert!(matches!(model.encode(&img), Err(Error::Argument(_))));
    }

    #[test]
    fn tail_forward_reproduces_encode() {
        let cfg = ModelConfig::toy();
        let model = Model::<f64>::random(&cfg, 9, &RandomInit::default()).unwrap();
        let acts = model.encode(&toy_image(&cfg, 10)).unwrap();
        let zbar = model.tail_forward(&acts, acts.last_attn()).unwrap();
        for (a, b) in zbar.iter().zip(&acts.zbar) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn stale_activations_are_rejected() {
        let cfg = ModelConfig::toy();
        let a = Model::<f64>::random(&cfg, 1, &RandomInit::default()).unwrap();
        let b = Model::<f64>::random(&cfg, 1, &RandomInit::default()).unwrap();
        let acts = a.encode(&toy_image(&cfg, 1)).unwrap();
        assert!(matches!(
            b.tail_vjp(&acts, &[0.0; 16]),
            Err(Error::Usage(_))
        ));
        assert!(matches!(b.tail_jacobian(&acts), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let cfg = ModelConfig::toy();
        let model = Model::<f64>::random(&cfg, 11, &RandomInit::default()).unwrap();
        let acts = model.encode(&toy_image(&cfg, 12)).unwrap();
        let g = model.tail_vjp(&acts, &[0.0; 16]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_slices_equal_basis_vjps() {
        let cfg = ModelConfig::toy();
        let model = Model::<f64>::random(&cfg, 13, &RandomInit::default()).unwrap();
        let acts = model.encode(&toy_image(&cfg, 14)).unwrap();
        let jac = model.tail_jacobian(&acts).unwrap();
        assert_eq!(jac.values().len(), 2 * 17 * 17 * 16);
        for k in [0, 7, 15] {
            let mut e = vec![0.0; 16];
            e[k] = 1.0;
            let slice = model.tail_vjp(&acts, &e).unwrap();
            for (idx, &v) in slice.iter().enumerate() {
                assert_eq!(jac.values()[idx * 16 + k], v);
            }
        }
    }

    #[test]
    fn bicubic_identity_and_constant() {
        let grid: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let same = bicubic_resize(&grid, 3, 3);
        for (a, b) in same.iter().zip(&grid) {
            assert!((a - b).abs() < 1e-12);
        }
        let up = bicubic_resize(&[2.5; 9], 3, 7);
        assert!(up.iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn bicubic_ramp_two_to_four() {
        // f = column index on a 2x2 grid. Output columns sample x = -0.25,
        // 0.25, 0.75, 1.25; taps outside the grid clamp to the border, so
        // with w(0.25) = 0.87890625, w(0.75) = 0.26171875,
        // w(1.25) = -0.10546875, w(1.75) = -0.03515625:
        let want = [-0.10546875, 0.2265625, 0.7734375, 1.10546875];
        let up = bicubic_resize(&[0.0, 1.0, 0.0, 1.0], 2, 4);
        for row in up.chunks(4) {
            for (a, b) in row.iter().zip(want) {
                assert!((a - b).abs() < 1e-12, "{row:?}");
            }
        }
        assert!((cubic_weight(0.25) - 0.87890625).abs() < 1e-15);
        assert!((cubic_weight(1.75) + 0.03515625).abs() < 1e-15);
    }

    #[test]
    fn bicubic_ramp_kept_where_samples_coincide() {
        // Scale 3: output columns 1 and 4 sit exactly on source columns 0 and 1.
        let up = bicubic_resize(&[0.0, 1.0, 0.0, 1.0], 2, 6);
        for row in up.chunks(6) {
            assert!(
                (row[1] - 0.0).abs() < 1e-12 && (row[4] - 1.0).abs() < 1e-12,
                "{row:?}"
            );
        }
    }

    #[test]
    fn cubic_weights_partition_unity() {
        for t in [0.0, 0.1, 0.25, 0.5, 0.9] {
            let s: f64 = (0..4).map(|k| cubic_weight(t - (k as f64 - 1.0))).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn resample_rejects_non_divisible_size() {
        let model = Model::<f64>::random(&ModelConfig::toy(), 1, &RandomInit::default()).unwrap();
        assert!(matches!(
            model.resample_pos_embed(18),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::QuickGelu, Activation::GeluTanh] {
            for x in [-2.0f64, -0.3, 0.0, 0.7, 1.9] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }
}

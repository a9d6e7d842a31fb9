//! Test-time optimization of a localized embedding token.
//!
//! Starting from the projected class token, the embedding is updated with
//! AdamW so that its explainability map matches a query mask under a soft
//! Dice loss, optionally regularized towards the class token by cosine
//! distance.
//!
//! The attention gradient `∇A = ∂(zbar·let)/∂A` is linear in `let`, so the
//! loss gradient factors as `dL/dlet = Jᵀ u` with `J = ∂zbar/∂A` and `u` the
//! cotangent of the map pipeline at `∇A`. Two interchangeable routes compute
//! the products with `J`:
//!
//! * vanilla: `J let` by a reverse-mode replay of the last block and `Jᵀ u`
//!   by the matching forward-mode replay, every step, for every mask;
//! * decomposed: `J` is materialized once per image and both products become
//!   dense contractions shared by every mask and every step.
//!
//! Min-max normalization is differentiated with the arg-min and arg-max
//! indices held fixed, and the ReLU subgradient at zero is zero.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::explain::{argmin_argmax, finalize_map, raw_map, score_cos, ExplainabilityMap};
use crate::mask::QueryMask;
use crate::real::{dot, gemm, norm, Op, Real};
use crate::vit::{EncoderActivations, ImageTensor, Model, ModelConfig, TailJacobian};

/// Attention-gradient values held at once by the decomposed batch path; it
/// bounds how many masks advance together.
const LOCKSTEP_BUDGET: usize = 1 << 25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradPath {
    Vanilla,
    #[default]
    Decomposed,
}

impl std::str::FromStr for GradPath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "decomposed" => Ok(Self::Decomposed),
            other => arg(format!(
                "unknown gradient path `{other}` (vanilla|decomposed)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    /// Weight of the cosine regularizer towards the class token.
    pub alpha: f64,
    /// Dice denominator guard.
    pub epsilon: f64,
    pub learning_rate: f64,
    pub adamw: AdamWConfig,
    pub grad_path: GradPath,
    pub record_trace: bool,
    /// Keep the map of every step (step 0 through `steps`).
    #[serde(default)]
    pub record_maps: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            alpha: 0.0,
            epsilon: 1e-6,
            learning_rate: 0.1,
            adamw: AdamWConfig::default(),
            grad_path: GradPath::Decomposed,
            record_trace: true,
            record_maps: false,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return arg(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.learning_rate > 0.0) {
            return arg(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            ));
        }
        let a = &self.adamw;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return arg(format!(
                "betas must lie in [0, 1), got ({}, {})",
                a.beta1, a.beta2
            ));
        }
        if !(a.eps > 0.0) || !a.weight_decay.is_finite() || !self.alpha.is_finite() {
            return arg("adamw eps must be positive; weight decay and alpha finite");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            first_moment: vec![T::zero(); dim],
            second_moment: vec![T::zero(); dim],
            step_count: 0,
        }
    }
}

/// Loss components at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossTerms {
    pub dice: f64,
    pub reg: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct LocalizedEmbedding<T> {
    pub vector: Vec<T>,
    /// Losses at steps `0..=steps`, empty unless traces were requested.
    pub loss_trace: Vec<LossTerms>,
    pub final_map: ExplainabilityMap<T>,
    /// Maps at steps `0..=steps`, empty unless maps were requested.
    pub step_maps: Vec<ExplainabilityMap<T>>,
    /// Some step had a constant map, so the Dice term gave no gradient.
    pub degenerate: bool,
}

/// Soft Dice loss `1 - 2 Σ(E·m) / (ΣE + Σm + ε)` on the token grid.
pub fn dice_loss<T: Real>(map: &[T], mask: &[T], epsilon: T) -> Result<T> {
    if map.len() != mask.len() {
        return arg(format!(
            "dice: map has {} cells, mask has {}",
            map.len(),
            mask.len()
        ));
    }
    let inter: T = map.iter().zip(mask).map(|(&e, &m)| e * m).sum();
    let union = map.iter().copied().sum::<T>() + mask.iter().copied().sum::<T>();
    Ok(T::one() - T::lit(2.0) * inter / (union + epsilon))
}

/// `1 - cos(let, cls)`.
pub fn reg_loss<T: Real>(let_vec: &[T], cls: &[T]) -> Result<T> {
    Ok(T::one() - score_cos(let_vec, cls)?)
}

pub fn total_loss<T: Real>(dice: T, reg: T, alpha: T) -> T {
    dice + alpha * reg
}

/// `d(1 - cos(let, cls)) / d let`.
fn reg_gradient<T: Real>(let_vec: &[T], cls: &[T]) -> Result<Vec<T>> {
    let (nl, nc) = (norm(let_vec), norm(cls));
    if nl == T::zero() || nc == T::zero() {
        return arg("regularizer of a zero-norm vector");
    }
    let cos = dot(let_vec, cls) / (nl * nc);
    Ok(let_vec
        .iter()
        .zip(cls)
        .map(|(&l, &c)| cos * l / (nl * nl) - c / (nl * nc))
        .collect())
}

/// Contracts `J` with `let` over the joint dimension: `heads × n × n`.
pub fn grad_attn_decomposed<T: Real>(jac: &TailJacobian<T>, let_vec: &[T]) -> Result<Vec<T>> {
    contract_rows(jac, let_vec, 1)
}

/// `rows × attn_len` attention gradients for `rows` stacked embeddings.
fn contract_rows<T: Real>(jac: &TailJacobian<T>, lets: &[T], rows: usize) -> Result<Vec<T>> {
    let d = jac.joint_dim();
    if lets.len() != rows * d {
        return arg(format!(
            "embedding length {} does not match jacobian dim {d}",
            lets.len() / rows.max(1)
        ));
    }
    let len = jac.attn_len();
    let mut out = vec![T::zero(); rows * len];
    gemm(
        rows,
        d,
        len,
        lets,
        Op::N,
        jac.values(),
        Op::T,
        T::zero(),
        &mut out,
    );
    Ok(out)
}

/// `rows × joint_dim` products `Jᵀ u` for `rows` stacked attention cotangents.
fn pullback_rows<T: Real>(jac: &TailJacobian<T>, cot: &[T], rows: usize) -> Vec<T> {
    let len = jac.attn_len();
    let d = jac.joint_dim();
    let mut out = vec![T::zero(); rows * d];
    gemm(
        rows,
        len,
        d,
        cot,
        Op::N,
        jac.values(),
        Op::N,
        T::zero(),
        &mut out,
    );
    out
}

/// Where the attention-gradient products come from.
#[derive(Clone, Copy)]
pub enum GradientSource<'a, T> {
    /// Replay the last block on every call.
    Vanilla {
        model: &'a Model<T>,
        acts: &'a EncoderActivations<T>,
    },
    /// Contract a precomputed jacobian.
    Decomposed {
        config: &'a ModelConfig,
        jac: &'a TailJacobian<T>,
    },
}

impl<'a, T: Real> GradientSource<'a, T> {
    pub fn config(&self) -> &'a ModelConfig {
        match *self {
            GradientSource::Vanilla { model, .. } => model.config(),
            GradientSource::Decomposed { config, .. } => config,
        }
    }

    /// `∂(zbar·let)/∂A`.
    pub fn attn_grad(&self, let_vec: &[T]) -> Result<Vec<T>> {
        match *self {
            GradientSource::Vanilla { model, acts } => model.tail_vjp(acts, let_vec),
            GradientSource::Decomposed { jac, .. } => grad_attn_decomposed(jac, let_vec),
        }
    }

    /// `Jᵀ u`: the embedding-space gradient of `<u, ∇A(let)>`.
    pub fn pullback(&self, cotangent: &[T]) -> Result<Vec<T>> {
        match *self {
            GradientSource::Vanilla { model, acts } => model.tail_jvp(acts, cotangent),
            GradientSource::Decomposed { jac, .. } => Ok(pullback_rows(jac, cotangent, 1)),
        }
    }
}

/// Value and embedding gradient of the total loss at one point.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    pub terms: LossTerms,
    pub grad: Vec<T>,
    pub map: ExplainabilityMap<T>,
    /// The map was constant; `grad` holds only the regularizer part.
    pub degenerate: bool,
}

/// Map and Dice value of one attention gradient. When the map is not
/// constant, `grad_attn` is overwritten in place by the cotangent of the
/// Dice loss with respect to it and `true` is returned; otherwise it is
/// zeroed and `false` is returned.
fn dice_through_map<T: Real>(
    grad_attn: &mut [T],
    grid_mask: &[T],
    config: &ModelConfig,
    epsilon: T,
) -> Result<(ExplainabilityMap<T>, T, bool)> {
    let raw = raw_map(grad_attn, config);
    let map = finalize_map(&raw, config);
    let dice = dice_loss(&map.grid, grid_mask, epsilon)?;
    let patches = &raw[1..];
    let (lo, hi) = argmin_argmax(patches);
    let range = patches[hi] - patches[lo];
    if !(range > T::zero()) {
        grad_attn.iter_mut().for_each(|g| *g = T::zero());
        return Ok((map, dice, false));
    }

    let two = T::lit(2.0);
    let denom =
        map.grid.iter().copied().sum::<T>() + grid_mask.iter().copied().sum::<T>() + epsilon;
    let inter: T = map.grid.iter().zip(grid_mask).map(|(&e, &m)| e * m).sum();
    let g_map: Vec<T> = grid_mask
        .iter()
        .map(|&m| -two * m / denom + two * inter / (denom * denom))
        .collect();

    // E_p = (r_p - r_lo) / (r_hi - r_lo) with lo and hi frozen.
    let sum_g: T = g_map.iter().copied().sum();
    let sum_ge: T = g_map.iter().zip(&map.grid).map(|(&g, &e)| g * e).sum();
    let n = config.tokens();
    let scale = T::one() / T::from_usize(config.heads * n).unwrap();
    let mut g_raw = vec![T::zero(); n];
    for (p, &g) in g_map.iter().enumerate() {
        g_raw[1 + p] = g / range;
    }
    g_raw[1 + lo] += (sum_ge - sum_g) / range;
    g_raw[1 + hi] -= sum_ge / range;
    for r in g_raw.iter_mut() {
        *r *= scale;
    }

    for row in grad_attn.chunks_exact_mut(n) {
        for (g, &r) in row.iter_mut().zip(&g_raw) {
            *g = if *g > T::zero() { r } else { T::zero() };
        }
    }
    Ok((map, dice, true))
}

fn finish_eval<T: Real>(
    dice_part: (ExplainabilityMap<T>, T),
    dice_grad: Option<Vec<T>>,
    let_vec: &[T],
    cls: &[T],
    cfg: &InversionConfig,
) -> Result<LossEval<T>> {
    let (map, dice) = dice_part;
    let alpha = T::lit(cfg.alpha);
    let reg = reg_loss(let_vec, cls)?;
    let degenerate = dice_grad.is_none();
    let mut grad = dice_grad.unwrap_or_else(|| vec![T::zero(); let_vec.len()]);
    if cfg.alpha != 0.0 {
        for (g, r) in grad.iter_mut().zip(reg_gradient(let_vec, cls)?) {
            *g += alpha * r;
        }
    }
    let terms = LossTerms {
        dice: dice.as_f64(),
        reg: reg.as_f64(),
        total: total_loss(dice, reg, alpha).as_f64(),
    };
    Ok(LossEval {
        terms,
        grad,
        map,
        degenerate,
    })
}

/// Total loss, its gradient with respect to the embedding and the current map.
pub fn loss_gradient<T: Real>(
    source: &GradientSource<'_, T>,
    let_vec: &[T],
    cls: &[T],
    grid_mask: &[T],
    cfg: &InversionConfig,
) -> Result<LossEval<T>> {
    let config = source.config();
    let g = config.grid();
    if grid_mask.len() != g * g {
        return arg(format!(
            "grid mask has {} cells, expected {}",
            grid_mask.len(),
            g * g
        ));
    }
    let mut cot = source.attn_grad(let_vec)?;
    let (map, dice, has) = dice_through_map(&mut cot, grid_mask, config, T::lit(cfg.epsilon))?;
    let dice_grad = has.then(|| source.pullback(&cot)).transpose()?;
    finish_eval((map, dice), dice_grad, let_vec, cls, cfg)
}

/// One AdamW update with decoupled weight decay, in place.
pub fn adamw_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &mut [T],
    grad: &[T],
    cfg: &InversionConfig,
) -> Result<()> {
    if state.first_moment.len() != params.len() || grad.len() != params.len() {
        return arg("optimizer state, parameters and gradient differ in length");
    }
    if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
        return Err(Error::Optimizer(format!(
            "non-finite gradient component {bad}"
        )));
    }
    let a = &cfg.adamw;
    let (b1, b2) = (T::lit(a.beta1), T::lit(a.beta2));
    let lr = T::lit(cfg.learning_rate);
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let decay = T::one() - lr * T::lit(a.weight_decay);
    let eps = T::lit(a.eps);
    for i in 0..params.len() {
        let g = grad[i];
        let m = b1 * state.first_moment[i] + (T::one() - b1) * g;
        let v = b2 * state.second_moment[i] + (T::one() - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        params[i] = decay * params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

fn check_mask(mask: &QueryMask, config: &ModelConfig) -> Result<()> {
    if mask.is_empty() {
        return arg("query mask is empty");
    }
    if mask.dims() != (config.image_size, config.image_size) {
        return arg(format!(
            "mask is {}x{}, model input is {}x{}",
            mask.width(),
            mask.height(),
            config.image_size,
            config.image_size
        ));
    }
    Ok(())
}

/// Grid-resolution soft mask for the model's patch size, rejecting empty masks.
pub fn grid_mask<T: Real>(mask: &QueryMask, config: &ModelConfig) -> Result<Vec<T>> {
    check_mask(mask, config)?;
    mask.resample_to_grid(config.patch_size)
}

struct Recorder<T> {
    trace: Vec<LossTerms>,
    maps: Vec<ExplainabilityMap<T>>,
    degenerate: bool,
}

impl<T: Real> Recorder<T> {
    fn new() -> Self {
        Self {
            trace: Vec::new(),
            maps: Vec::new(),
            degenerate: false,
        }
    }

    fn push(&mut self, eval: &LossEval<T>, cfg: &InversionConfig) {
        self.degenerate |= eval.degenerate;
        if cfg.record_trace {
            self.trace.push(eval.terms);
        }
        if cfg.record_maps {
            self.maps.push(eval.map.clone());
        }
    }

    fn finish(self, vector: Vec<T>, final_map: ExplainabilityMap<T>) -> LocalizedEmbedding<T> {
        LocalizedEmbedding {
            vector,
            loss_trace: self.trace,
            final_map,
            step_maps: self.maps,
            degenerate: self.degenerate,
        }
    }
}

/// Runs the optimization for one soft grid mask from `cls`.
pub fn invert_grid<T: Real>(
    source: &GradientSource<'_, T>,
    cls: &[T],
    grid_mask: &[T],
    cfg: &InversionConfig,
) -> Result<LocalizedEmbedding<T>> {
    cfg.validate()?;
    let mut let_vec = cls.to_vec();
    let mut state = OptimizerState::new(cls.len());
    let mut rec = Recorder::new();
    for _ in 0..cfg.steps {
        let eval = loss_gradient(source, &let_vec, cls, grid_mask, cfg)?;
        rec.push(&eval, cfg);
        adamw_step(&mut state, &mut let_vec, &eval.grad, cfg)?;
    }
    let last = loss_gradient(source, &let_vec, cls, grid_mask, cfg)?;
    rec.push(&last, cfg);
    Ok(rec.finish(let_vec, last.map))
}

/// Localized embedding for one mask on an already encoded image.
pub fn mask_inversion<T: Real>(
    model: &Model<T>,
    acts: &EncoderActivations<T>,
    mask: &QueryMask,
    cfg: &InversionConfig,
) -> Result<LocalizedEmbedding<T>> {
    cfg.validate()?;
    let grid = grid_mask(mask, model.config())?;
    match cfg.grad_path {
        GradPath::Vanilla => invert_grid(
            &GradientSource::Vanilla { model, acts },
            &acts.cls,
            &grid,
            cfg,
        ),
        GradPath::Decomposed => {
            let jac = model.tail_jacobian(acts)?;
            let source = GradientSource::Decomposed {
                config: model.config(),
                jac: &jac,
            };
            invert_grid(&source, &acts.cls, &grid, cfg)
        }
    }
}

/// Encodes `image` once and inverts every mask. The decomposed path builds
/// the jacobian once and advances all masks together; the vanilla path
/// replays the last block per mask and step. Results are in mask order and
/// each depends only on its own mask.
pub fn mask_inversion_batch<T: Real>(
    model: &Model<T>,
    image: &ImageTensor<T>,
    masks: &[QueryMask],
    cfg: &InversionConfig,
) -> Result<Vec<LocalizedEmbedding<T>>> {
    cfg.validate()?;
    if masks.is_empty() {
        return arg("at least one mask is required");
    }
    masks
        .iter()
        .try_for_each(|m| check_mask(m, model.config()))?;
    mask_inversion_encoded(model, &model.encode(image)?, masks, cfg)
}

/// [`mask_inversion_batch`] on an already encoded image.
pub fn mask_inversion_encoded<T: Real>(
    model: &Model<T>,
    acts: &EncoderActivations<T>,
    masks: &[QueryMask],
    cfg: &InversionConfig,
) -> Result<Vec<LocalizedEmbedding<T>>> {
    cfg.validate()?;
    if masks.is_empty() {
        return arg("at least one mask is required");
    }
    let grids = masks
        .iter()
        .map(|m| grid_mask::<T>(m, model.config()))
        .collect::<Result<Vec<_>>>()?;
    match cfg.grad_path {
        GradPath::Vanilla => {
            let source = GradientSource::Vanilla { model, acts };
            grids
                .par_iter()
                .map(|g| invert_grid(&source, &acts.cls, g, cfg))
                .collect()
        }
        GradPath::Decomposed => {
            let jac = model.tail_jacobian(acts)?;
            let mut out = Vec::with_capacity(masks.len());
            let rows = (LOCKSTEP_BUDGET / jac.attn_len()).max(1);
            for chunk in grids.chunks(rows) {
                out.extend(invert_lockstep(
                    model.config(),
                    &jac,
                    &acts.cls,
                    chunk,
                    cfg,
                )?);
            }
            Ok(out)
        }
    }
}

/// Decomposed inversion of several masks sharing one jacobian: each step is
/// two dense products over the whole chunk.
fn invert_lockstep<T: Real>(
    config: &ModelConfig,
    jac: &TailJacobian<T>,
    cls: &[T],
    grids: &[Vec<T>],
    cfg: &InversionConfig,
) -> Result<Vec<LocalizedEmbedding<T>>> {
    let rows = grids.len();
    let d = cls.len();
    let len = jac.attn_len();
    let eps = T::lit(cfg.epsilon);
    let mut lets: Vec<T> = cls.iter().copied().cycle().take(rows * d).collect();
    let mut states: Vec<OptimizerState<T>> = (0..rows).map(|_| OptimizerState::new(d)).collect();
    let mut recs: Vec<Recorder<T>> = (0..rows).map(|_| Recorder::new()).collect();

    let mut attn = vec![T::zero(); rows * len];
    let mut pulled = vec![T::zero(); rows * d];
    let mut evaluate = |lets: &[T], with_grad: bool| -> Result<Vec<LossEval<T>>> {
        gemm(
            rows,
            d,
            len,
            lets,
            Op::N,
            jac.values(),
            Op::T,
            T::zero(),
            &mut attn,
        );
        let mut parts = Vec::with_capacity(rows);
        for (row, grid) in attn.chunks_exact_mut(len).zip(grids) {
            parts.push(dice_through_map(row, grid, config, eps)?);
        }
        if with_grad {
            gemm(
                rows,
                len,
                d,
                &attn,
                Op::N,
                jac.values(),
                Op::N,
                T::zero(),
                &mut pulled,
            );
        }
        parts
            .into_iter()
            .enumerate()
            .map(|(r, (map, dice, has))| {
                let dice_grad = (with_grad && has).then(|| pulled[r * d..(r + 1) * d].to_vec());
                let mut eval =
                    finish_eval((map, dice), dice_grad, &lets[r * d..(r + 1) * d], cls, cfg)?;
                eval.degenerate = !has;
                Ok(eval)
            })
            .collect()
    };

    for _ in 0..cfg.steps {
        let evals = evaluate(&lets, true)?;
        for (r, eval) in evals.iter().enumerate() {
            recs[r].push(eval, cfg);
            adamw_step(
                &mut states[r],
                &mut lets[r * d..(r + 1) * d],
                &eval.grad,
                cfg,
            )?;
        }
    }
    let finals = evaluate(&lets, false)?;
    Ok(recs
        .into_iter()
        .zip(finals)
        .enumerate()
        .map(|(r, (mut rec, eval))| {
            rec.push(&eval, cfg);
            rec.finish(lets[r * d..(r + 1) * d].to_vec(), eval.map)
        })
        .collect())
}

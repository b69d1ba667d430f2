//! The stacked network: HGRU token mixers with a layer-monotone
//! forget-gate lower bound, GLU channel mixers, embeddings, and the
//! language-model head, with the structural ablation switches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HgrnError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowerBoundMode {
    /// Softmax over the layer axis followed by the shifted cumulative sum:
    /// ordered bounds in [0,1), zero at layer 1.
    Monotone,
    /// No lower bound (gamma identically zero).
    None,
    /// Per-layer independent sigmoid bounds, no ordering.
    Random,
    /// Monotone schedule reversed along the layer axis.
    Decreasing,
    /// Data-independent decay: the gate is the bound itself.
    Only,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputGateMode {
    /// Input weighted by `1 - lambda_t` (convex combination).
    Tied,
    /// Input weight fixed to 1 ("w/o input gate" ablation).
    One,
    /// Independent sigmoid input gate.
    Independent,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub glu_expansion: Option<usize>,
    #[serde(default = "default_lower_bound")]
    pub lower_bound_mode: LowerBoundMode,
    #[serde(default = "default_true")]
    pub use_complex: bool,
    #[serde(default)]
    pub theta_data_dependent: bool,
    #[serde(default = "default_input_gate")]
    pub input_gate: InputGateMode,
    #[serde(default = "default_true")]
    pub use_output_gate: bool,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_seq_len_max")]
    pub seq_len_max: usize,
}

fn default_lower_bound() -> LowerBoundMode {
    LowerBoundMode::Monotone
}
fn default_input_gate() -> InputGateMode {
    InputGateMode::Tied
}
fn default_true() -> bool {
    true
}
fn default_norm_eps() -> f64 {
    1e-5
}
fn default_seq_len_max() -> usize {
    2048
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(HgrnError::Config("layers must be >= 1".into()));
        }
        if self.dim < 2 || self.dim % 2 != 0 {
            return Err(HgrnError::Config(format!(
                "dim must be even and >= 2, got {}",
                self.dim
            )));
        }
        if self.vocab_size < 2 {
            return Err(HgrnError::Config("vocab_size must be >= 2".into()));
        }
        if self.glu_expansion() < self.dim {
            return Err(HgrnError::Config(format!(
                "glu_expansion {} must be >= dim {}",
                self.glu_expansion(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn glu_expansion(&self) -> usize {
        self.glu_expansion.unwrap_or(2 * self.dim)
    }

    /// Width of the recurrence output fed to the output gate and norm.
    pub fn mix_width(&self) -> usize {
        if self.use_complex {
            2 * self.dim
        } else {
            self.dim
        }
    }
}

#[derive(Clone, Debug)]
pub struct HgruParams<T> {
    pub w_mu: Tensor<T>,
    pub b_mu: Tensor<T>,
    pub w_cr: Tensor<T>,
    pub b_cr: Tensor<T>,
    pub w_ci: Option<Tensor<T>>,
    pub b_ci: Option<Tensor<T>>,
    pub theta: Option<Tensor<T>>,
    pub w_theta: Option<Tensor<T>>,
    pub b_theta: Option<Tensor<T>>,
    pub w_i: Option<Tensor<T>>,
    pub b_i: Option<Tensor<T>>,
    pub w_g: Option<Tensor<T>>,
    pub b_g: Option<Tensor<T>>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub norm_gain: Tensor<T>,
    pub norm_bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct GluParams<T> {
    pub w_u: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_down: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BlockParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub hgru: HgruParams<T>,
    pub glu: GluParams<T>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub embedding: Tensor<T>,
    pub gamma: Tensor<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All parameters, in the fixed checkpoint order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        out.push(("gamma".into(), &self.gamma));
        for (k, blk) in self.blocks.iter().enumerate() {
            let p = |name: &str| format!("blocks.{k}.{name}");
            out.push((p("ln1_gain"), &blk.ln1_gain));
            out.push((p("ln1_bias"), &blk.ln1_bias));
            out.push((p("ln2_gain"), &blk.ln2_gain));
            out.push((p("ln2_bias"), &blk.ln2_bias));
            out.push((p("hgru.w_mu"), &blk.hgru.w_mu));
            out.push((p("hgru.b_mu"), &blk.hgru.b_mu));
            out.push((p("hgru.w_cr"), &blk.hgru.w_cr));
            out.push((p("hgru.b_cr"), &blk.hgru.b_cr));
            if let Some(t) = &blk.hgru.w_ci {
                out.push((p("hgru.w_ci"), t));
            }
            if let Some(t) = &blk.hgru.b_ci {
                out.push((p("hgru.b_ci"), t));
            }
            if let Some(t) = &blk.hgru.theta {
                out.push((p("hgru.theta"), t));
            }
            if let Some(t) = &blk.hgru.w_theta {
                out.push((p("hgru.w_theta"), t));
            }
            if let Some(t) = &blk.hgru.b_theta {
                out.push((p("hgru.b_theta"), t));
            }
            if let Some(t) = &blk.hgru.w_i {
                out.push((p("hgru.w_i"), t));
            }
            if let Some(t) = &blk.hgru.b_i {
                out.push((p("hgru.b_i"), t));
            }
            if let Some(t) = &blk.hgru.w_g {
                out.push((p("hgru.w_g"), t));
            }
            if let Some(t) = &blk.hgru.b_g {
                out.push((p("hgru.b_g"), t));
            }
            out.push((p("hgru.w_o"), &blk.hgru.w_o));
            out.push((p("hgru.b_o"), &blk.hgru.b_o));
            out.push((p("hgru.norm_gain"), &blk.hgru.norm_gain));
            out.push((p("hgru.norm_bias"), &blk.hgru.norm_bias));
            out.push((p("glu.w_u"), &blk.glu.w_u));
            out.push((p("glu.w_v"), &blk.glu.w_v));
            out.push((p("glu.w_down"), &blk.glu.w_down));
        }
        out.push(("final_gain".into(), &self.final_gain));
        out.push(("final_bias".into(), &self.final_bias));
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Same order as [`named`](Self::named), with mutable access.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding));
        out.push(("gamma".into(), &mut self.gamma));
        for (k, blk) in self.blocks.iter_mut().enumerate() {
            let p = |name: &str| format!("blocks.{k}.{name}");
            out.push((p("ln1_gain"), &mut blk.ln1_gain));
            out.push((p("ln1_bias"), &mut blk.ln1_bias));
            out.push((p("ln2_gain"), &mut blk.ln2_gain));
            out.push((p("ln2_bias"), &mut blk.ln2_bias));
            out.push((p("hgru.w_mu"), &mut blk.hgru.w_mu));
            out.push((p("hgru.b_mu"), &mut blk.hgru.b_mu));
            out.push((p("hgru.w_cr"), &mut blk.hgru.w_cr));
            out.push((p("hgru.b_cr"), &mut blk.hgru.b_cr));
            if let Some(t) = &mut blk.hgru.w_ci {
                out.push((p("hgru.w_ci"), t));
            }
            if let Some(t) = &mut blk.hgru.b_ci {
                out.push((p("hgru.b_ci"), t));
            }
            if let Some(t) = &mut blk.hgru.theta {
                out.push((p("hgru.theta"), t));
            }
            if let Some(t) = &mut blk.hgru.w_theta {
                out.push((p("hgru.w_theta"), t));
            }
            if let Some(t) = &mut blk.hgru.b_theta {
                out.push((p("hgru.b_theta"), t));
            }
            if let Some(t) = &mut blk.hgru.w_i {
                out.push((p("hgru.w_i"), t));
            }
            if let Some(t) = &mut blk.hgru.b_i {
                out.push((p("hgru.b_i"), t));
            }
            if let Some(t) = &mut blk.hgru.w_g {
                out.push((p("hgru.w_g"), t));
            }
            if let Some(t) = &mut blk.hgru.b_g {
                out.push((p("hgru.b_g"), t));
            }
            out.push((p("hgru.w_o"), &mut blk.hgru.w_o));
            out.push((p("hgru.b_o"), &mut blk.hgru.b_o));
            out.push((p("hgru.norm_gain"), &mut blk.hgru.norm_gain));
            out.push((p("hgru.norm_bias"), &mut blk.hgru.norm_bias));
            out.push((p("glu.w_u"), &mut blk.glu.w_u));
            out.push((p("glu.w_v"), &mut blk.glu.w_v));
            out.push((p("glu.w_down"), &mut blk.glu.w_down));
        }
        out.push(("final_gain".into(), &mut self.final_gain));
        out.push(("final_bias".into(), &mut self.final_bias));
        out.push(("head_w".into(), &mut self.head_w));
        out.push(("head_b".into(), &mut self.head_b));
        out
    }

    pub fn count_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// RoPE frequency ladder: `theta_j = base^(-2*floor(j/2)/d)`.
pub fn rope_theta_ladder(d: usize, base: f64) -> Vec<f64> {
    (0..d)
        .map(|j| base.powf(-2.0 * ((j / 2) as f64) / d as f64))
        .collect()
}

/// Fresh parameters for `cfg`, deterministic in `seed`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let width = cfg.mix_width();
    let e = cfg.glu_expansion();
    let lin = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
        Tensor::<T>::uniform(vec![fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
    };
    let ladder = rope_theta_ladder(d, 10_000.0);
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let hgru = HgruParams {
            w_mu: lin(&mut rng, d, d),
            b_mu: Tensor::zeros(vec![d]),
            w_cr: lin(&mut rng, d, d),
            b_cr: Tensor::zeros(vec![d]),
            w_ci: cfg.use_complex.then(|| lin(&mut rng, d, d)),
            b_ci: cfg.use_complex.then(|| Tensor::zeros(vec![d])),
            theta: (cfg.use_complex && !cfg.theta_data_dependent)
                .then(|| Tensor::from_vec_f64(vec![1, d], &ladder).unwrap()),
            w_theta: (cfg.use_complex && cfg.theta_data_dependent)
                .then(|| lin(&mut rng, d, d)),
            b_theta: (cfg.use_complex && cfg.theta_data_dependent)
                .then(|| Tensor::from_vec_f64(vec![d], &ladder).unwrap()),
            w_i: matches!(cfg.input_gate, InputGateMode::Independent)
                .then(|| lin(&mut rng, d, d)),
            b_i: matches!(cfg.input_gate, InputGateMode::Independent)
                .then(|| Tensor::zeros(vec![d])),
            w_g: cfg.use_output_gate.then(|| lin(&mut rng, d, width)),
            b_g: cfg.use_output_gate.then(|| Tensor::zeros(vec![width])),
            w_o: lin(&mut rng, width, d),
            b_o: Tensor::zeros(vec![d]),
            norm_gain: Tensor::full(vec![width], T::one()),
            norm_bias: Tensor::zeros(vec![width]),
        };
        let glu = GluParams {
            w_u: lin(&mut rng, d, e),
            w_v: lin(&mut rng, d, e),
            w_down: lin(&mut rng, e, d),
        };
        blocks.push(BlockParams {
            ln1_gain: Tensor::full(vec![d], T::one()),
            ln1_bias: Tensor::zeros(vec![d]),
            ln2_gain: Tensor::full(vec![d], T::one()),
            ln2_bias: Tensor::zeros(vec![d]),
            hgru,
            glu,
        });
    }
    Ok(ModelParams {
        embedding: Tensor::uniform(vec![cfg.vocab_size, d], 1.0 / (d as f64).sqrt(), &mut rng),
        gamma: Tensor::zeros(vec![cfg.layers, d]),
        blocks,
        final_gain: Tensor::full(vec![d], T::one()),
        final_bias: Tensor::zeros(vec![d]),
        head_w: lin(&mut rng, d, cfg.vocab_size),
        head_b: Tensor::zeros(vec![cfg.vocab_size]),
    })
}

/// Tape handles for every parameter, mirroring [`ModelParams`].
pub struct ParamVars {
    pub embedding: Var,
    pub gamma: Var,
    pub blocks: Vec<BlockVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub head_w: Var,
    pub head_b: Var,
    /// Leaves in the same fixed order as [`ModelParams::named`].
    pub ordered: Vec<Var>,
}

pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub hgru: HgruVars,
    pub glu: GluVars,
}

pub struct HgruVars {
    pub w_mu: Var,
    pub b_mu: Var,
    pub w_cr: Var,
    pub b_cr: Var,
    pub w_ci: Option<Var>,
    pub b_ci: Option<Var>,
    pub theta: Option<Var>,
    pub w_theta: Option<Var>,
    pub b_theta: Option<Var>,
    pub w_i: Option<Var>,
    pub b_i: Option<Var>,
    pub w_g: Option<Var>,
    pub b_g: Option<Var>,
    pub w_o: Var,
    pub b_o: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

pub struct GluVars {
    pub w_u: Var,
    pub w_v: Var,
    pub w_down: Var,
}

/// Inserts every parameter as a tape leaf (requires_grad when `train`).
pub fn bind_params<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    train: bool,
) -> ParamVars {
    let ordered = std::cell::RefCell::new(Vec::new());
    let tape = std::cell::RefCell::new(tape);
    let leaf = |t: &Tensor<T>| {
        let v = tape.borrow_mut().leaf(t.clone(), train);
        ordered.borrow_mut().push(v);
        v
    };
    let opt = |t: &Option<Tensor<T>>| t.as_ref().map(leaf);
    let embedding = leaf(&params.embedding);
    let gamma = leaf(&params.gamma);
    let blocks = params
        .blocks
        .iter()
        .map(|blk| BlockVars {
            ln1_gain: leaf(&blk.ln1_gain),
            ln1_bias: leaf(&blk.ln1_bias),
            ln2_gain: leaf(&blk.ln2_gain),
            ln2_bias: leaf(&blk.ln2_bias),
            hgru: HgruVars {
                w_mu: leaf(&blk.hgru.w_mu),
                b_mu: leaf(&blk.hgru.b_mu),
                w_cr: leaf(&blk.hgru.w_cr),
                b_cr: leaf(&blk.hgru.b_cr),
                w_ci: opt(&blk.hgru.w_ci),
                b_ci: opt(&blk.hgru.b_ci),
                theta: opt(&blk.hgru.theta),
                w_theta: opt(&blk.hgru.w_theta),
                b_theta: opt(&blk.hgru.b_theta),
                w_i: opt(&blk.hgru.w_i),
                b_i: opt(&blk.hgru.b_i),
                w_g: opt(&blk.hgru.w_g),
                b_g: opt(&blk.hgru.b_g),
                w_o: leaf(&blk.hgru.w_o),
                b_o: leaf(&blk.hgru.b_o),
                norm_gain: leaf(&blk.hgru.norm_gain),
                norm_bias: leaf(&blk.hgru.norm_bias),
            },
            glu: GluVars {
                w_u: leaf(&blk.glu.w_u),
                w_v: leaf(&blk.glu.w_v),
                w_down: leaf(&blk.glu.w_down),
            },
        })
        .collect();
    let final_gain = leaf(&params.final_gain);
    let final_bias = leaf(&params.final_bias);
    let head_w = leaf(&params.head_w);
    let head_b = leaf(&params.head_b);
    ParamVars {
        embedding,
        gamma,
        blocks,
        final_gain,
        final_bias,
        head_w,
        head_b,
        ordered: ordered.into_inner(),
    }
}

/// Per-layer lower-bound rows as an `[H x d]` tape node.
pub fn compute_lower_bounds<T: Scalar>(
    tape: &mut Tape<T>,
    gamma: Var,
    mode: LowerBoundMode,
) -> Result<Var> {
    match mode {
        LowerBoundMode::Monotone | LowerBoundMode::Only => {
            let p = tape.softmax_dim0(gamma)?;
            tape.cumsum_shifted_dim0(p)
        }
        LowerBoundMode::Random => Ok(tape.sigmoid(gamma)),
        LowerBoundMode::Decreasing => {
            let p = tape.softmax_dim0(gamma)?;
            let mono = tape.cumsum_shifted_dim0(p)?;
            tape.flip_rows(mono)
        }
        LowerBoundMode::None => {
            let shape = tape.value(gamma).shape().to_vec();
            Ok(tape.constant(Tensor::zeros(shape)))
        }
    }
}

pub struct HgruOut {
    pub out: Var,
    /// Recorded decay rates for gate statistics.
    pub lambda: Var,
    /// Rotation angles: one row when time-shared, n rows when
    /// data-dependent, absent in real mode.
    pub theta: Option<Var>,
}

/// One token mixer: gates, projections, fused recurrence, output gate,
/// norm, and projection back to width d.
pub fn hgru_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &HgruVars,
    gamma_row: Var,
    cfg: &ModelConfig,
) -> Result<HgruOut> {
    let (n, _d) = tape.value(x).dims2()?;
    let lambda = if matches!(cfg.lower_bound_mode, LowerBoundMode::Only) {
        tape.repeat_row(gamma_row, n)?
    } else {
        let mu_pre = tape.affine(x, vars.w_mu, Some(vars.b_mu))?;
        let mu = tape.sigmoid(mu_pre);
        let headroom = tape.one_minus(gamma_row);
        let scaled = tape.mul_row_bcast(mu, headroom)?;
        tape.add_row_bcast(scaled, gamma_row)?
    };
    let weight = match cfg.input_gate {
        InputGateMode::Tied => tape.one_minus(lambda),
        InputGateMode::One => {
            let shape = tape.value(lambda).shape().to_vec();
            tape.constant(Tensor::full(shape, T::one()))
        }
        InputGateMode::Independent => {
            let w_i = vars.w_i.ok_or_else(|| {
                HgrnError::Config("independent input gate requires w_i".into())
            })?;
            let pre = tape.affine(x, w_i, vars.b_i)?;
            tape.sigmoid(pre)
        }
    };
    let cr_pre = tape.affine(x, vars.w_cr, Some(vars.b_cr))?;
    let c_re = tape.silu(cr_pre);
    let (theta, c_im) = if cfg.use_complex {
        let theta = if cfg.theta_data_dependent {
            let w_t = vars.w_theta.ok_or_else(|| {
                HgrnError::Config("theta_data_dependent requires w_theta".into())
            })?;
            Some(tape.affine(x, w_t, vars.b_theta)?)
        } else {
            vars.theta
        };
        let w_ci = vars
            .w_ci
            .ok_or_else(|| HgrnError::Config("complex mode requires w_ci".into()))?;
        let ci_pre = tape.affine(x, w_ci, vars.b_ci)?;
        (theta, Some(tape.silu(ci_pre)))
    } else {
        (None, None)
    };
    let h = tape.scan(lambda, theta, weight, c_re, c_im)?;
    if !tape.value(h).is_finite() {
        return Err(HgrnError::Numeric(
            "non-finite value after hgru recurrence".into(),
        ));
    }
    let gated = if cfg.use_output_gate {
        let w_g = vars
            .w_g
            .ok_or_else(|| HgrnError::Config("output gate requires w_g".into()))?;
        let g_pre = tape.affine(x, w_g, vars.b_g)?;
        let g = tape.sigmoid(g_pre);
        tape.mul(g, h)?
    } else {
        h
    };
    let normed = tape.layer_norm(gated, vars.norm_gain, vars.norm_bias, cfg.norm_eps)?;
    let out = tape.affine(normed, vars.w_o, Some(vars.b_o))?;
    if !tape.value(out).is_finite() {
        return Err(HgrnError::Numeric(
            "non-finite value after hgru output projection".into(),
        ));
    }
    Ok(HgruOut { out, lambda, theta })
}

/// SiLU-gated linear unit: `(silu(x W_u) (*) x W_v) W_down`.
pub fn glu_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, vars: &GluVars) -> Result<Var> {
    let u = tape.affine(x, vars.w_u, None)?;
    let gate = tape.silu(u);
    let v = tape.affine(x, vars.w_v, None)?;
    let prod = tape.mul(gate, v)?;
    tape.affine(prod, vars.w_down, None)
}

/// Pre-norm residual block: `x + HGRU(LN(x))`, then `x + GLU(LN(x))`.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &BlockVars,
    gamma_row: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Var, Option<Var>)> {
    let n1 = tape.layer_norm(x, vars.ln1_gain, vars.ln1_bias, cfg.norm_eps)?;
    let mixed = hgru_forward(tape, n1, &vars.hgru, gamma_row, cfg)?;
    let x1 = tape.add(x, mixed.out)?;
    let n2 = tape.layer_norm(x1, vars.ln2_gain, vars.ln2_bias, cfg.norm_eps)?;
    let ch = glu_forward(tape, n2, &vars.glu)?;
    let x2 = tape.add(x1, ch)?;
    Ok((x2, mixed.lambda, mixed.theta))
}

pub struct ModelOutput {
    pub logits: Var,
    /// One `[n x d]` decay record per layer, bottom to top.
    pub lambdas: Vec<Var>,
    /// Matching rotation-angle records (None in real mode).
    pub thetas: Vec<Option<Var>>,
}

/// Full forward pass: embed, H blocks (block k uses bound row k), final
/// norm, head projection.
pub fn model_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    tokens: &[usize],
    cfg: &ModelConfig,
) -> Result<ModelOutput> {
    let mut x = tape.embedding(vars.embedding, tokens)?;
    let bounds = compute_lower_bounds(tape, vars.gamma, cfg.lower_bound_mode)?;
    let mut lambdas = Vec::with_capacity(cfg.layers);
    let mut thetas = Vec::with_capacity(cfg.layers);
    for (k, blk) in vars.blocks.iter().enumerate() {
        let gamma_row = tape.row_gather(bounds, k)?;
        let (next, lambda, theta) = block_forward(tape, x, blk, gamma_row, cfg)?;
        x = next;
        lambdas.push(lambda);
        thetas.push(theta);
    }
    let normed = tape.layer_norm(x, vars.final_gain, vars.final_bias, cfg.norm_eps)?;
    let logits = tape.affine(normed, vars.head_w, Some(vars.head_b))?;
    Ok(ModelOutput {
        logits,
        lambdas,
        thetas,
    })
}

/// Gate pre-activation needed to realize decay `lambda_bar` above bound
/// `gamma`: `mu = (lambda_bar - gamma) / (1 - gamma)`, strictly below
/// `lambda_bar` whenever `0 < gamma < lambda_bar < 1`.
pub fn mu_for_target(lambda_bar: f64, gamma: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma) || !(gamma..=1.0).contains(&lambda_bar) {
        return Err(HgrnError::Contract(format!(
            "need 0 <= gamma <= lambda_bar <= 1, got gamma={gamma}, lambda_bar={lambda_bar}"
        )));
    }
    Ok((lambda_bar - gamma) / (1.0 - gamma))
}

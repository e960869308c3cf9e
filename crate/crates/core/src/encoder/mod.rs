//! The student query encoder: backbone, mean pooling, a two-layer GELU
//! projector and a final L2 normalization, with hand-written backprop.
//!
//! The backbone is a learnable hashed embedding bag. When external features
//! are configured the backbone is bypassed and the provided (already pooled)
//! vector enters the projector directly.

mod features;
mod tokenizer;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{dot, l2_normalize, norm, Embedding, Matrix};
use crate::error::{Error, Result};

pub use features::{FeatureStore, FEATURE_MAGIC, FEATURE_VERSION};
pub use tokenizer::{fnv1a64, tokenize, TokenPattern, TokenizerConfig};

/// Standard deviation of the initial weights and backbone rows.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    EmbeddingBag,
    ExternalFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub tokenizer: TokenizerConfig,
    pub input: InputMode,
    /// Width of the pooled backbone output (or of the external features).
    pub hidden_dim: usize,
    pub projector_dim: usize,
    /// Must equal the teacher embedding dimension.
    pub output_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig::default(),
            input: InputMode::EmbeddingBag,
            hidden_dim: 64,
            projector_dim: 64,
            output_dim: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("projector_dim", self.projector_dim),
            ("output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    fn backbone_rows(&self) -> usize {
        match self.input {
            InputMode::EmbeddingBag => self.tokenizer.hash_buckets,
            InputMode::ExternalFeatures => 0,
        }
    }
}

/// What the encoder consumes for one query.
#[derive(Debug, Clone, PartialEq)]
pub enum EncoderInput {
    Tokens(Vec<usize>),
    Features(Vec<f64>),
}

/// Trainable parameters. `backbone` is `buckets × hidden`, `w1` is
/// `hidden × projector`, `w2` is `projector × output`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    pub backbone: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    W1,
    B1,
    W2,
    B2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Backbone,
        ParamGroup::W1,
        ParamGroup::B1,
        ParamGroup::W2,
        ParamGroup::B2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::W1 => "w1",
            ParamGroup::B1 => "b1",
            ParamGroup::W2 => "w2",
            ParamGroup::B2 => "b2",
        }
    }
}

impl StudentParams {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self {
            backbone: Matrix::zeros(cfg.backbone_rows(), cfg.hidden_dim),
            w1: Matrix::zeros(cfg.hidden_dim, cfg.projector_dim),
            b1: vec![0.0; cfg.projector_dim],
            w2: Matrix::zeros(cfg.projector_dim, cfg.output_dim),
            b2: vec![0.0; cfg.output_dim],
        }
    }

    /// Weights and backbone rows ~ Normal(0, 0.02); biases zero.
    pub fn init<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for m in [&mut p.backbone, &mut p.w1, &mut p.w2] {
            for v in m.as_mut_slice() {
                *v = normal.sample(rng);
            }
        }
        p
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.b2.len()
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::Backbone => self.backbone.as_slice(),
            ParamGroup::W1 => self.w1.as_slice(),
            ParamGroup::B1 => &self.b1,
            ParamGroup::W2 => self.w2.as_slice(),
            ParamGroup::B2 => &self.b2,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::Backbone => self.backbone.as_mut_slice(),
            ParamGroup::W1 => self.w1.as_mut_slice(),
            ParamGroup::B1 => &mut self.b1,
            ParamGroup::W2 => self.w2.as_mut_slice(),
            ParamGroup::B2 => &mut self.b2,
        }
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL
            .iter()
            .all(|&g| self.group(g).iter().all(|v| v.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        ParamGroup::ALL.iter().map(|&g| self.group(g).len()).sum()
    }
}

/// Intermediates cached by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    /// Token ids sorted ascending; empty in feature mode.
    pub token_ids: Vec<usize>,
    pub pooled: Vec<f64>,
    pub pre_act: Vec<f64>,
    pub hidden: Vec<f64>,
    pub pre_norm: Vec<f64>,
    pub output: Embedding,
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// `Φ(x) + x·φ(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    normal_cdf(x) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// `out = x · m + b` for a row vector `x`.
fn affine(x: &[f64], m: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(i)) {
            *o += xi * w;
        }
    }
    out
}

pub fn forward(params: &StudentParams, input: &EncoderInput) -> Result<ForwardTape> {
    let h = params.hidden_dim();
    let (token_ids, pooled) = match input {
        EncoderInput::Tokens(ids) => {
            if ids.is_empty() {
                return Err(Error::EmptyQuery(String::new()));
            }
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            let rows = params.backbone.rows();
            let mut acc = vec![0.0; h];
            for &t in &sorted {
                if t >= rows {
                    return Err(Error::DimMismatch {
                        expected: rows,
                        got: t,
                    });
                }
                for (a, v) in acc.iter_mut().zip(params.backbone.row(t)) {
                    *a += v;
                }
            }
            let inv = 1.0 / sorted.len() as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
            (sorted, acc)
        }
        EncoderInput::Features(v) => {
            if v.len() != h {
                return Err(Error::DimMismatch {
                    expected: h,
                    got: v.len(),
                });
            }
            (Vec::new(), v.clone())
        }
    };
    let pre_act = affine(&pooled, &params.w1, &params.b1);
    let hidden: Vec<f64> = pre_act.iter().map(|&x| gelu(x)).collect();
    let pre_norm = affine(&hidden, &params.w2, &params.b2);
    let output = l2_normalize(&pre_norm)?;
    Ok(ForwardTape {
        token_ids,
        pooled,
        pre_act,
        hidden,
        pre_norm,
        output,
    })
}

/// Parameter gradients. Backbone gradients are sparse: only rows touched by
/// the batch appear, keyed by bucket id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: BTreeMap<usize, Vec<f64>>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(p: &StudentParams) -> Self {
        Self {
            backbone: BTreeMap::new(),
            w1: Matrix::zeros(p.w1.rows(), p.w1.cols()),
            b1: vec![0.0; p.b1.len()],
            w2: Matrix::zeros(p.w2.rows(), p.w2.cols()),
            b2: vec![0.0; p.b2.len()],
        }
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (&row, g) in &other.backbone {
            let dst = self
                .backbone
                .entry(row)
                .or_insert_with(|| vec![0.0; g.len()]);
            axpy(dst, g, scale);
        }
        axpy(self.w1.as_mut_slice(), other.w1.as_slice(), scale);
        axpy(&mut self.b1, &other.b1, scale);
        axpy(self.w2.as_mut_slice(), other.w2.as_slice(), scale);
        axpy(&mut self.b2, &other.b2, scale);
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.backbone.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
        for v in self
            .w1
            .as_mut_slice()
            .iter_mut()
            .chain(self.b1.iter_mut())
            .chain(self.w2.as_mut_slice().iter_mut())
            .chain(self.b2.iter_mut())
        {
            *v *= s;
        }
    }

    /// Gradient of one flat coordinate within a parameter group.
    pub fn get(&self, group: ParamGroup, index: usize) -> f64 {
        match group {
            ParamGroup::Backbone => {
                let cols = self.w1.rows();
                self.backbone
                    .get(&(index / cols))
                    .map_or(0.0, |r| r[index % cols])
            }
            ParamGroup::W1 => self.w1.as_slice()[index],
            ParamGroup::B1 => self.b1[index],
            ParamGroup::W2 => self.w2.as_slice()[index],
            ParamGroup::B2 => self.b2[index],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.backbone.values().flatten().all(|v| v.is_finite())
            && self
                .w1
                .as_slice()
                .iter()
                .chain(&self.b1)
                .chain(self.w2.as_slice())
                .chain(&self.b2)
                .all(|v| v.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.backbone
            .values()
            .flatten()
            .chain(self.w1.as_slice())
            .chain(&self.b1)
            .chain(self.w2.as_slice())
            .chain(&self.b2)
            .map(|v| v * v)
            .sum()
    }
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Backpropagates `grad_output = ∂L/∂output` (w.r.t. the normalized output)
/// through normalization, projector and pooling.
pub fn backward(tape: &ForwardTape, params: &StudentParams, grad_output: &[f64]) -> Result<Gradients> {
    let d = params.output_dim();
    if grad_output.len() != d {
        return Err(Error::DimMismatch {
            expected: d,
            got: grad_output.len(),
        });
    }
    let mut grads = Gradients::zeros_like(params);

    // (I - y yᵀ) g / ‖z‖
    let y = tape.output.as_slice();
    let z_norm = norm(&tape.pre_norm);
    let proj = dot(y, grad_output);
    let g_pre_norm: Vec<f64> = grad_output
        .iter()
        .zip(y)
        .map(|(g, yi)| (g - yi * proj) / z_norm)
        .collect();

    grads.b2.copy_from_slice(&g_pre_norm);
    let mut g_hidden = vec![0.0; tape.hidden.len()];
    for (j, (&hj, gh)) in tape.hidden.iter().zip(g_hidden.iter_mut()).enumerate() {
        let w_row = params.w2.row(j);
        *gh = dot(w_row, &g_pre_norm);
        for (gw, gz) in grads.w2.row_mut(j).iter_mut().zip(&g_pre_norm) {
            *gw = hj * gz;
        }
    }

    let g_pre_act: Vec<f64> = g_hidden
        .iter()
        .zip(&tape.pre_act)
        .map(|(g, &x)| g * gelu_grad(x))
        .collect();
    grads.b1.copy_from_slice(&g_pre_act);
    let mut g_pooled = vec![0.0; tape.pooled.len()];
    for (i, (&xi, gp)) in tape.pooled.iter().zip(g_pooled.iter_mut()).enumerate() {
        *gp = dot(params.w1.row(i), &g_pre_act);
        for (gw, ga) in grads.w1.row_mut(i).iter_mut().zip(&g_pre_act) {
            *gw = xi * ga;
        }
    }

    if !tape.token_ids.is_empty() {
        let inv = 1.0 / tape.token_ids.len() as f64;
        for &t in &tape.token_ids {
            let row = grads
                .backbone
                .entry(t)
                .or_insert_with(|| vec![0.0; g_pooled.len()]);
            axpy(row, &g_pooled, inv);
        }
    }
    Ok(grads)
}

/// Encoder configuration together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentEncoder {
    pub config: EncoderConfig,
    pub params: StudentParams,
}

impl StudentEncoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = StudentParams::init(&config, rng);
        Ok(Self { config, params })
    }

    /// Builds the encoder input for one query: external features when the
    /// encoder is configured for them, tokens of `text` otherwise.
    pub fn input_for(
        &self,
        id: &str,
        text: &str,
        features: Option<&FeatureStore>,
    ) -> Result<EncoderInput> {
        match self.config.input {
            InputMode::EmbeddingBag => Ok(EncoderInput::Tokens(tokenize(text, &self.config.tokenizer)?)),
            InputMode::ExternalFeatures => {
                let store = features.ok_or_else(|| Error::MissingFeature(id.to_string()))?;
                let v = store.lookup(id)?;
                Ok(EncoderInput::Features(v.iter().map(|&x| f64::from(x)).collect()))
            }
        }
    }

    pub fn encode(&self, input: &EncoderInput) -> Result<Embedding> {
        Ok(forward(&self.params, input)?.output)
    }

    pub fn encode_text(&self, text: &str) -> Result<Embedding> {
        let ids = tokenize(text, &self.config.tokenizer)?;
        self.encode(&EncoderInput::Tokens(ids))
    }
}

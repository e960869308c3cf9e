//! Distillation objectives and their gradients with respect to the student
//! query embeddings.
//!
//! Batch losses are the arithmetic mean of per-item losses, and every
//! returned gradient is the gradient of that mean. Teacher-side inputs are
//! constants: no gradient path to them exists in this API.

use serde::{Deserialize, Serialize};

use crate::embedding::{check_temperature, dot, log_sum_exp, norm, tempered_log_softmax, Matrix};
use crate::error::{Error, Result};

pub const DEFAULT_TAU_TEACHER: f64 = 0.07;
pub const DEFAULT_TAU_STUDENT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Align,
    Rank,
    Combined,
    #[serde(rename = "infonce")]
    InfoNce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub objective: Objective,
    /// Ignored by InfoNCE.
    #[serde(default)]
    pub lambda_align: f64,
    #[serde(default)]
    pub lambda_rank: f64,
    #[serde(default = "default_tau_teacher")]
    pub tau_teacher: f64,
    #[serde(default = "default_tau_student")]
    pub tau_student: f64,
}

fn default_tau_teacher() -> f64 {
    DEFAULT_TAU_TEACHER
}

fn default_tau_student() -> f64 {
    DEFAULT_TAU_STUDENT
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::align()
    }
}

impl LossConfig {
    pub fn align() -> Self {
        Self::combined(1.0, 0.0)
    }

    pub fn rank() -> Self {
        Self::combined(0.0, 1.0)
    }

    /// `λ_a·L_align + λ_r·L_rank`; collapses to `Align`/`Rank` when one weight is zero.
    pub fn combined(lambda_align: f64, lambda_rank: f64) -> Self {
        let objective = match (lambda_align > 0.0, lambda_rank > 0.0) {
            (true, false) => Objective::Align,
            (false, true) => Objective::Rank,
            _ => Objective::Combined,
        };
        Self {
            objective,
            lambda_align,
            lambda_rank,
            tau_teacher: DEFAULT_TAU_TEACHER,
            tau_student: DEFAULT_TAU_STUDENT,
        }
    }

    pub fn infonce() -> Self {
        Self {
            objective: Objective::InfoNce,
            lambda_align: 0.0,
            lambda_rank: 0.0,
            tau_teacher: DEFAULT_TAU_TEACHER,
            tau_student: DEFAULT_TAU_STUDENT,
        }
    }

    /// The six objectives of the loss ablation grid, labeled.
    pub fn ablation_grid() -> Vec<(&'static str, LossConfig)> {
        vec![
            ("Align", Self::combined(1.0, 0.0)),
            ("Align-dom", Self::combined(1.0, 0.5)),
            ("Combined", Self::combined(1.0, 1.0)),
            ("Rank-dom", Self::combined(0.5, 1.0)),
            ("Rank", Self::combined(0.0, 1.0)),
            ("InfoNCE", Self::infonce()),
        ]
    }

    /// All constraint violations, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lambda_align >= 0.0 && self.lambda_align.is_finite()) {
            v.push(format!("lambda_align must be >= 0, got {}", self.lambda_align));
        }
        if !(self.lambda_rank >= 0.0 && self.lambda_rank.is_finite()) {
            v.push(format!("lambda_rank must be >= 0, got {}", self.lambda_rank));
        }
        if check_temperature(self.tau_teacher).is_err() {
            v.push(format!("tau_teacher must be positive, got {}", self.tau_teacher));
        }
        if check_temperature(self.tau_student).is_err() {
            v.push(format!("tau_student must be positive, got {}", self.tau_student));
        }
        match self.objective {
            Objective::InfoNce => {}
            _ if self.lambda_align + self.lambda_rank <= 0.0 => {
                v.push("lambda_align + lambda_rank must be positive".into())
            }
            Objective::Align if self.lambda_rank != 0.0 => {
                v.push("objective align requires lambda_rank = 0".into())
            }
            Objective::Rank if self.lambda_align != 0.0 => {
                v.push("objective rank requires lambda_align = 0".into())
            }
            _ => {}
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v.join("; ")))
        }
    }

    fn align_weight(&self) -> f64 {
        match self.objective {
            Objective::InfoNce => 0.0,
            _ => self.lambda_align,
        }
    }

    fn rank_weight(&self) -> f64 {
        match self.objective {
            Objective::InfoNce => 0.0,
            _ => self.lambda_rank,
        }
    }

    /// Whether teacher document embeddings must be cached for this objective.
    pub fn needs_documents(&self) -> bool {
        self.objective == Objective::InfoNce || self.rank_weight() > 0.0
    }

    pub fn label(&self) -> String {
        match self.objective {
            Objective::InfoNce => "infonce".into(),
            _ => format!("align{}_rank{}", self.lambda_align, self.lambda_rank),
        }
    }
}

/// `1 − cos(v_s, v_t)` and its gradient with respect to `v_s`, which may be
/// unnormalized.
pub fn align_loss(v_s: &[f64], v_t: &[f64]) -> Result<(f64, Vec<f64>)> {
    if v_s.len() != v_t.len() {
        return Err(Error::DimMismatch {
            expected: v_t.len(),
            got: v_s.len(),
        });
    }
    let ns = norm(v_s);
    let nt = norm(v_t);
    if ns == 0.0 || nt == 0.0 {
        return Err(Error::DegenerateInput("zero-norm vector in align loss".into()));
    }
    let d = dot(v_s, v_t);
    let cos = d / (ns * nt);
    // ∂cos/∂a = b/(|a||b|) − (a·b)·a/(|a|³|b|)
    let grad = v_s
        .iter()
        .zip(v_t)
        .map(|(a, b)| -(b / (ns * nt) - d * a / (ns * ns * ns * nt)))
        .collect();
    Ok((1.0 - cos, grad))
}

fn check_batch(q: &Matrix, other: &Matrix) -> Result<()> {
    if q.cols() != other.cols() {
        return Err(Error::DimMismatch {
            expected: other.cols(),
            got: q.cols(),
        });
    }
    if q.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

/// Mean align loss over a batch of paired rows.
pub fn batch_align_loss(q_s: &Matrix, q_t: &Matrix) -> Result<(f64, Matrix)> {
    check_batch(q_s, q_t)?;
    if q_s.rows() != q_t.rows() {
        return Err(Error::DimMismatch {
            expected: q_t.rows(),
            got: q_s.rows(),
        });
    }
    let b = q_s.rows() as f64;
    let mut grad = Matrix::zeros(q_s.rows(), q_s.cols());
    let mut total = 0.0;
    for i in 0..q_s.rows() {
        let (l, g) = align_loss(q_s.row(i), q_t.row(i))?;
        total += l;
        for (dst, v) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = v / b;
        }
    }
    Ok((total / b, grad))
}

/// Mean over items of `KL(p_t ‖ p_s)` where `p_t = softmax(q_t Dᵀ/τ_t)` and
/// `p_s = softmax(q_s Dᵀ/τ_s)` range over the in-batch documents `D`.
///
/// The per-item gradient is `(p_s − p_t)·D/τ_s`, divided by B for the mean.
pub fn rank_loss(
    q_s: &Matrix,
    q_t: &Matrix,
    docs: &Matrix,
    tau_t: f64,
    tau_s: f64,
) -> Result<(f64, Matrix)> {
    check_temperature(tau_t)?;
    check_temperature(tau_s)?;
    check_batch(q_s, docs)?;
    check_batch(q_t, docs)?;
    if q_s.rows() != q_t.rows() {
        return Err(Error::DimMismatch {
            expected: q_t.rows(),
            got: q_s.rows(),
        });
    }
    if docs.rows() < 2 {
        log::warn!("rank loss on a batch with a single document is identically zero");
    }
    let b = q_s.rows() as f64;
    let s_scores = q_s.mul_transpose(docs)?;
    let t_scores = q_t.mul_transpose(docs)?;
    let mut grad = Matrix::zeros(q_s.rows(), q_s.cols());
    let mut total = 0.0;
    for i in 0..q_s.rows() {
        let log_pt = tempered_log_softmax(t_scores.row(i), tau_t)?;
        let log_ps = tempered_log_softmax(s_scores.row(i), tau_s)?;
        let mut kl = 0.0;
        for (lt, ls) in log_pt.iter().zip(&log_ps) {
            let pt = lt.exp();
            if pt > 0.0 {
                kl += pt * (lt - ls);
            }
        }
        total += kl;
        let g = grad.row_mut(i);
        for (j, (lt, ls)) in log_pt.iter().zip(&log_ps).enumerate() {
            let coeff = (ls.exp() - lt.exp()) / (tau_s * b);
            for (gk, dk) in g.iter_mut().zip(docs.row(j)) {
                *gk += coeff * dk;
            }
        }
    }
    Ok((total / b, grad))
}

/// Mean cross-entropy of `softmax(q_s Dᵀ/τ_s)` against one-hot positives.
pub fn infonce_loss(
    q_s: &Matrix,
    docs: &Matrix,
    positives: &[usize],
    tau_s: f64,
) -> Result<(f64, Matrix)> {
    check_temperature(tau_s)?;
    check_batch(q_s, docs)?;
    if positives.len() != q_s.rows() {
        return Err(Error::DimMismatch {
            expected: q_s.rows(),
            got: positives.len(),
        });
    }
    if let Some(&bad) = positives.iter().find(|&&p| p >= docs.rows()) {
        return Err(Error::DimMismatch {
            expected: docs.rows(),
            got: bad,
        });
    }
    let b = q_s.rows() as f64;
    let scores = q_s.mul_transpose(docs)?;
    let mut grad = Matrix::zeros(q_s.rows(), q_s.cols());
    let mut total = 0.0;
    for (i, &pos) in positives.iter().enumerate() {
        let scaled: Vec<f64> = scores.row(i).iter().map(|s| s / tau_s).collect();
        let lse = log_sum_exp(&scaled);
        total += lse - scaled[pos];
        let g = grad.row_mut(i);
        for (j, s) in scaled.iter().enumerate() {
            let p = (s - lse).exp();
            let coeff = (p - if j == pos { 1.0 } else { 0.0 }) / (tau_s * b);
            for (gk, dk) in g.iter_mut().zip(docs.row(j)) {
                *gk += coeff * dk;
            }
        }
    }
    Ok((total / b, grad))
}

/// Inputs for one batch. `docs` row i is the positive document of query i.
#[derive(Debug, Clone, Copy)]
pub struct BatchInputs<'a> {
    pub student: &'a Matrix,
    pub teacher: &'a Matrix,
    pub docs: Option<&'a Matrix>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub align: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infonce: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLossResult {
    pub loss: f64,
    pub grad_student: Matrix,
    pub components: LossComponents,
}

pub fn combined_loss(cfg: &LossConfig, inputs: BatchInputs<'_>) -> Result<BatchLossResult> {
    cfg.validate()?;
    let q_s = inputs.student;
    let docs = if cfg.needs_documents() {
        Some(inputs.docs.ok_or_else(|| {
            Error::MissingDocEmbeddings(format!("objective {}", cfg.label()))
        })?)
    } else {
        None
    };
    let mut grad = Matrix::zeros(q_s.rows(), q_s.cols());
    let mut loss = 0.0;
    let mut components = LossComponents::default();

    if cfg.objective == Objective::InfoNce {
        let docs = docs.expect("checked above");
        let positives: Vec<usize> = (0..q_s.rows()).collect();
        let (l, g) = infonce_loss(q_s, docs, &positives, cfg.tau_student)?;
        components.infonce = Some(l);
        return Ok(BatchLossResult {
            loss: l,
            grad_student: g,
            components,
        });
    }

    let wa = cfg.align_weight();
    if wa > 0.0 {
        let (l, g) = batch_align_loss(q_s, inputs.teacher)?;
        components.align = Some(l);
        loss += wa * l;
        axpy(grad.as_mut_slice(), g.as_slice(), wa);
    }
    let wr = cfg.rank_weight();
    if wr > 0.0 {
        let docs = docs.expect("checked above");
        let (l, g) = rank_loss(q_s, inputs.teacher, docs, cfg.tau_teacher, cfg.tau_student)?;
        components.rank = Some(l);
        loss += wr * l;
        axpy(grad.as_mut_slice(), g.as_slice(), wr);
    }
    if !loss.is_finite() {
        return Err(Error::DegenerateInput(format!("non-finite loss {loss}")));
    }
    Ok(BatchLossResult {
        loss,
        grad_student: grad,
        components,
    })
}

fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

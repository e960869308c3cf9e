//! Mini-batch training loop with accumulation, scheduling and checkpoint
//! selection by validation loss.

mod checkpoint;

pub use checkpoint::{initial_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{random_subset, QueryRecord};
use crate::embedding::{cosine, Embedding, Matrix};
use crate::encoder::{
    backward, forward, EncoderConfig, EncoderInput, FeatureStore, Gradients, StudentEncoder, StudentParams,
};
use crate::error::{Error, Result};
use crate::io::sha256_hex;
use crate::losses::{combined_loss, BatchInputs, LossComponents, LossConfig};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::schedule::{OneCycle, DEFAULT_DIV_FACTOR, DEFAULT_FINAL_DIV_FACTOR};
use crate::teacher::TeacherCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    OneCycle,
    /// `peak_lr` at every update.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleKind,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub epochs: usize,
    pub seed: u64,
    pub subset_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            loss: LossConfig::align(),
            optimizer: OptimizerConfig::Sgd,
            schedule: ScheduleKind::OneCycle,
            peak_lr: 2e-4,
            warmup_frac: 0.03,
            div_factor: DEFAULT_DIV_FACTOR,
            final_div_factor: DEFAULT_FINAL_DIV_FACTOR,
            batch_size: 256,
            grad_accum: 4,
            epochs: 20,
            seed: 42,
            subset_fraction: 1.0,
        }
    }
}

impl RunConfig {
    /// Schedule for the language-augmented training set: half the epochs,
    /// a slightly higher peak learning rate.
    pub fn multilingual(self) -> Self {
        Self {
            epochs: 10,
            peak_lr: 3e-4,
            ..self
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Err(e) = self.encoder.validate() {
            v.push(format!("encoder: {e}"));
        }
        v.extend(self.loss.violations().into_iter().map(|s| format!("loss: {s}")));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            v.push(format!("peak_lr must be positive and finite, got {}", self.peak_lr));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            v.push(format!("warmup_frac must be in (0, 1), got {}", self.warmup_frac));
        }
        if !(self.div_factor >= 1.0 && self.div_factor.is_finite()) {
            v.push(format!("div_factor must be >= 1, got {}", self.div_factor));
        }
        if !(self.final_div_factor >= 1.0 && self.final_div_factor.is_finite()) {
            v.push(format!("final_div_factor must be >= 1, got {}", self.final_div_factor));
        }
        if self.batch_size == 0 {
            v.push("batch_size must be positive".into());
        }
        if self.grad_accum == 0 {
            v.push("grad_accum must be positive".into());
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            v.push(format!("subset_fraction must be in (0, 1], got {}", self.subset_fraction));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
                v.push(format!("adam betas must be in [0, 1), got ({beta1}, {beta2})"));
            }
            if eps.is_nan() || eps <= 0.0 {
                v.push(format!("adam eps must be positive, got {eps}"));
            }
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

    /// SHA-256 of the canonical JSON serialization.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn updates_per_epoch(&self, n: usize) -> u64 {
        let micro = n.div_ceil(self.batch_size);
        micro.div_ceil(self.grad_accum) as u64
    }

    pub fn lr_at(&self, update: u64, total_updates: u64) -> Result<f64> {
        match self.schedule {
            ScheduleKind::Constant => Ok(self.peak_lr),
            ScheduleKind::OneCycle => OneCycle {
                peak_lr: self.peak_lr,
                warmup_frac: self.warmup_frac,
                div_factor: self.div_factor,
                final_div_factor: self.final_div_factor,
                total_steps: total_updates,
            }
            .lr(update),
        }
    }
}

/// Teacher caches (and optional precomputed features) a run reads from.
#[derive(Debug, Clone, Copy)]
pub struct Caches<'a> {
    pub queries: &'a TeacherCache,
    pub documents: Option<&'a TeacherCache>,
    pub features: Option<&'a FeatureStore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MetricEvent {
    Update {
        step: u64,
        micro_step: u64,
        epoch: usize,
        lr: f64,
        train_loss: f64,
        components: LossComponents,
    },
    Epoch {
        epoch: usize,
        step: u64,
        micro_step: u64,
        #[serde(skip_serializing_if = "Option::is_none")]
        train_loss: Option<f64>,
        val_loss: f64,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Lowest validation loss seen, including the initialization.
    pub checkpoint: Checkpoint,
    pub final_params: StudentParams,
    pub metrics: Vec<MetricEvent>,
    pub train_queries: usize,
    /// Training queries dropped because they produced no tokens.
    pub skipped_queries: usize,
    pub updates: u64,
    pub micro_steps: u64,
}

struct Example {
    input: EncoderInput,
    teacher: Vec<f64>,
    doc: Option<Vec<f64>>,
}

fn prepare(
    encoder: &StudentEncoder,
    records: &[QueryRecord],
    caches: &Caches<'_>,
    with_docs: bool,
) -> Result<(Vec<Example>, usize)> {
    if caches.queries.dim() != encoder.config.output_dim {
        return Err(Error::DimMismatch {
            expected: encoder.config.output_dim,
            got: caches.queries.dim(),
        });
    }
    let docs = if with_docs {
        let d = caches.documents.ok_or_else(|| {
            Error::MissingDocEmbeddings("a teacher document cache is required by this objective".into())
        })?;
        if d.dim() != caches.queries.dim() {
            return Err(Error::DimMismatch {
                expected: caches.queries.dim(),
                got: d.dim(),
            });
        }
        Some(d)
    } else {
        None
    };
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        let input = match encoder.input_for(&r.id, &r.text, caches.features) {
            Ok(i) => i,
            Err(Error::EmptyQuery(_)) => {
                log::warn!("skipping query {} with no tokens", r.id);
                skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let teacher = caches
            .queries
            .embedding(&r.id)
            .map_err(|_| Error::MissingEmbedding(r.id.clone()))?
            .into_vec();
        let doc = match docs {
            Some(d) => Some(
                d.embedding(&r.positive_doc_id)
                    .map_err(|_| Error::MissingEmbedding(r.positive_doc_id.clone()))?
                    .into_vec(),
            ),
            None => None,
        };
        out.push(Example { input, teacher, doc });
    }
    Ok((out, skipped))
}

struct MicroResult {
    loss: f64,
    components: LossComponents,
    grads: Gradients,
}

/// Loss of one batch and its gradient with respect to every parameter.
/// Row i of `teacher` (and of `docs`) belongs to `inputs[i]`.
pub fn loss_and_gradients(
    params: &StudentParams,
    loss: &LossConfig,
    inputs: &[&EncoderInput],
    teacher: &Matrix,
    docs: Option<&Matrix>,
) -> Result<(f64, LossComponents, Gradients)> {
    let tapes = inputs
        .par_iter()
        .map(|i| forward(params, i))
        .collect::<Result<Vec<_>>>()?;
    let student = Matrix::from_rows(&tapes.iter().map(|t| t.output.as_slice().to_vec()).collect::<Vec<_>>())?;
    let res = combined_loss(
        loss,
        BatchInputs {
            student: &student,
            teacher,
            docs,
        },
    )?;
    let per_example = tapes
        .par_iter()
        .enumerate()
        .map(|(i, t)| backward(t, params, res.grad_student.row(i)))
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::zeros_like(params);
    for g in &per_example {
        grads.add_scaled(g, 1.0);
    }
    Ok((res.loss, res.components, grads))
}

fn micro_step(params: &StudentParams, loss: &LossConfig, batch: &[&Example]) -> Result<MicroResult> {
    let inputs: Vec<&EncoderInput> = batch.iter().map(|e| &e.input).collect();
    let teacher = Matrix::from_rows(&batch.iter().map(|e| e.teacher.clone()).collect::<Vec<_>>())?;
    let docs = if loss.needs_documents() {
        Some(Matrix::from_rows(
            &batch
                .iter()
                .map(|e| e.doc.clone().expect("prepared with documents"))
                .collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    let (loss, components, grads) = loss_and_gradients(params, loss, &inputs, &teacher, docs.as_ref())?;
    Ok(MicroResult {
        loss,
        components,
        grads,
    })
}

/// Mean `1 − cos` between student and teacher over `examples`.
fn mean_align(params: &StudentParams, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::DegenerateInput("validation set is empty".into()));
    }
    let losses = examples
        .par_iter()
        .map(|e| {
            let out = forward(params, &e.input)?.output;
            let t = Embedding::from_unit(e.teacher.clone())?;
            Ok(1.0 - cosine(&out, &t)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn weighted_components(parts: &[(f64, LossComponents)]) -> LossComponents {
    let avg = |get: fn(&LossComponents) -> Option<f64>| -> Option<f64> {
        let mut any = false;
        let mut s = 0.0;
        for (w, c) in parts {
            if let Some(v) = get(c) {
                any = true;
                s += w * v;
            }
        }
        any.then_some(s)
    };
    LossComponents {
        align: avg(|c| c.align),
        rank: avg(|c| c.rank),
        infonce: avg(|c| c.infonce),
    }
}

/// Validation loss of `params`: mean alignment loss over `val`, whatever the
/// training objective.
pub fn validation_loss(encoder: &StudentEncoder, val: &[QueryRecord], caches: &Caches<'_>) -> Result<f64> {
    let (examples, _) = prepare(encoder, val, caches, false)?;
    mean_align(&encoder.params, &examples)
}

pub fn train(config: &RunConfig, train_set: &[QueryRecord], val: &[QueryRecord], caches: &Caches<'_>) -> Result<TrainOutcome> {
    train_with(config, train_set, val, caches, |_| {})
}

/// As [`train`], calling `on_event` for every metric record as it is produced.
pub fn train_with<F: FnMut(&MetricEvent)>(
    config: &RunConfig,
    train_set: &[QueryRecord],
    val: &[QueryRecord],
    caches: &Caches<'_>,
    mut on_event: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    let digest = config.digest();
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut encoder = StudentEncoder::new(config.encoder.clone(), &mut init_rng)?;

    let subset;
    let records = if config.subset_fraction < 1.0 {
        subset = random_subset(train_set, config.subset_fraction, config.seed)?;
        &subset[..]
    } else {
        train_set
    };
    let (examples, skipped) = prepare(&encoder, records, caches, config.loss.needs_documents())?;
    let (val_examples, _) = prepare(&encoder, val, caches, false)?;
    if examples.is_empty() && config.epochs > 0 {
        return Err(Error::EmptyBatch);
    }

    let per_epoch = config.updates_per_epoch(examples.len());
    let total_updates = per_epoch * config.epochs as u64;
    let mut optimizer = Optimizer::new(config.optimizer, &encoder.params);
    let mut metrics = Vec::new();
    let mut emit = |ev: MetricEvent, metrics: &mut Vec<MetricEvent>| {
        on_event(&ev);
        metrics.push(ev);
    };

    let init_val = mean_align(&encoder.params, &val_examples)?;
    emit(
        MetricEvent::Epoch {
            epoch: 0,
            step: 0,
            micro_step: 0,
            train_loss: None,
            val_loss: init_val,
        },
        &mut metrics,
    );
    let mut best = Checkpoint {
        encoder: config.encoder.clone(),
        params: encoder.params.clone(),
        step: 0,
        val_loss: init_val,
        config_digest: digest.clone(),
    };

    let mut step = 0u64;
    let mut micro = 0u64;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let batches: Vec<Vec<&Example>> = order
            .chunks(config.batch_size)
            .map(|c| c.iter().map(|&i| &examples[i]).collect())
            .collect();
        let mut epoch_loss = 0.0;
        for group in batches.chunks(config.grad_accum) {
            let lr = config.lr_at(step, total_updates)?;
            let n: usize = group.iter().map(Vec::len).sum();
            let mut grads = Gradients::zeros_like(&encoder.params);
            let mut loss = 0.0;
            let mut parts = Vec::with_capacity(group.len());
            for batch in group {
                let w = batch.len() as f64 / n as f64;
                let r = micro_step(&encoder.params, &config.loss, batch).map_err(|e| match e {
                    Error::DegenerateInput(reason) => Error::DivergedRun { step, reason },
                    other => other,
                })?;
                micro += 1;
                grads.add_scaled(&r.grads, w);
                loss += w * r.loss;
                parts.push((w, r.components));
            }
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::DivergedRun {
                    step,
                    reason: format!("non-finite loss or gradient (loss {loss})"),
                });
            }
            optimizer.step(&mut encoder.params, &grads, lr);
            if !encoder.params.is_finite() {
                return Err(Error::DivergedRun {
                    step,
                    reason: "non-finite parameters after update".into(),
                });
            }
            emit(
                MetricEvent::Update {
                    step,
                    micro_step: micro,
                    epoch,
                    lr,
                    train_loss: loss,
                    components: weighted_components(&parts),
                },
                &mut metrics,
            );
            epoch_loss += loss;
            step += 1;
        }
        let val_loss = mean_align(&encoder.params, &val_examples).map_err(|e| match e {
            Error::DegenerateInput(reason) => Error::DivergedRun { step, reason },
            other => other,
        })?;
        if !val_loss.is_finite() {
            return Err(Error::DivergedRun {
                step,
                reason: "non-finite validation loss".into(),
            });
        }
        emit(
            MetricEvent::Epoch {
                epoch,
                step,
                micro_step: micro,
                train_loss: Some(epoch_loss / per_epoch as f64),
                val_loss,
            },
            &mut metrics,
        );
        log::info!("epoch {epoch}/{} step {step} val_loss {val_loss:.6}", config.epochs);
        if val_loss < best.val_loss {
            best = Checkpoint {
                encoder: config.encoder.clone(),
                params: encoder.params.clone(),
                step,
                val_loss,
                config_digest: digest.clone(),
            };
        }
    }

    Ok(TrainOutcome {
        checkpoint: best,
        final_params: encoder.params,
        metrics,
        train_queries: examples.len(),
        skipped_queries: skipped,
        updates: step,
        micro_steps: micro,
    })
}

//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::encoder::{Gradients, ParamGroup, StudentParams};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    #[default]
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer with its state. Adam moments are dense over every parameter,
/// including backbone rows that received no gradient this step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &StudentParams) -> Self {
        let (m, v) = match config {
            OptimizerConfig::Sgd => (Vec::new(), Vec::new()),
            OptimizerConfig::Adam { .. } => {
                let zeros: Vec<Vec<f64>> = ParamGroup::ALL
                    .iter()
                    .map(|&g| vec![0.0; params.group(g).len()])
                    .collect();
                (zeros.clone(), zeros)
            }
        };
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut StudentParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let h = params.hidden_dim();
        match self.config {
            OptimizerConfig::Sgd => {
                for (&row, g) in &grads.backbone {
                    for (p, gv) in params.backbone.row_mut(row).iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
                for group in [ParamGroup::W1, ParamGroup::B1, ParamGroup::W2, ParamGroup::B2] {
                    let g = dense_group(grads, group);
                    for (p, gv) in params.group_mut(group).iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                for (gi, &group) in ParamGroup::ALL.iter().enumerate() {
                    let p = params.group_mut(group);
                    let n_rows = p.len().checked_div(h).unwrap_or(0);
                    let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
                    let mut update = |i: usize, g: f64| {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        p[i] -= lr * mhat / (vhat.sqrt() + eps);
                    };
                    if group == ParamGroup::Backbone {
                        for r in 0..n_rows {
                            let g = grads.backbone.get(&r);
                            for c in 0..h {
                                update(r * h + c, g.map_or(0.0, |g| g[c]));
                            }
                        }
                    } else {
                        for (i, &g) in dense_group(grads, group).iter().enumerate() {
                            update(i, g);
                        }
                    }
                }
            }
        }
    }
}

fn dense_group(grads: &Gradients, group: ParamGroup) -> &[f64] {
    match group {
        ParamGroup::W1 => grads.w1.as_slice(),
        ParamGroup::B1 => &grads.b1,
        ParamGroup::W2 => grads.w2.as_slice(),
        ParamGroup::B2 => &grads.b2,
        ParamGroup::Backbone => &[],
    }
}

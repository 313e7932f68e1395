//! Belief prior: an independent Dirichlet per world variable, fitted by
//! maximum likelihood (plus an L2 penalty on the concentrations) to a FIFO
//! buffer of recently-seen beliefs. Sampling the prior gives the synthetic
//! beliefs the inference models train on.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::Distribution;
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::ndauto::{softplus, softplus_inv, ParamStore, Tensor};
use crate::problem::{Belief, SpaceSpec};

/// Default concentration every entry starts from.
pub const INIT_ALPHA: f64 = 0.1;
/// Default refit schedule.
pub const FIT_ITERS: usize = 50;
pub const FIT_LR: f64 = 0.01;
/// Default L2 weight on the concentration vector.
pub const L2_WEIGHT: f64 = 900_000.0;
/// Default buffer capacity.
pub const BUFFER_CAPACITY: usize = 2500;

/// Belief entries are clamped into [`BELIEF_FLOOR`, 1] and renormalized
/// before any logarithm is taken.
pub const BELIEF_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("cannot fit a prior to an empty buffer")]
    EmptyBuffer,
    #[error("belief does not live on the prior's variable space")]
    SpaceMismatch,
    #[error("invalid concentration: {0}")]
    BadAlpha(String),
}

/// FIFO ring of beliefs; pushing beyond capacity drops the oldest entry.
#[derive(Debug, Clone)]
pub struct BeliefBuffer {
    capacity: usize,
    items: VecDeque<Belief>,
}

impl BeliefBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "buffer capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, belief: Belief) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(belief);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Belief> {
        self.items.iter()
    }
}

/// Clamp a probability row into [`BELIEF_FLOOR`, 1] and renormalize.
fn clamp_row(row: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = row.iter().map(|&p| p.clamp(BELIEF_FLOOR, 1.0)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|p| p / total).collect()
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Dirichlet negative log-likelihood over `n` observations with per-entry
/// summed logs, plus `l2 * |alpha|^2`; the gradient is with respect to alpha.
fn nll_and_grad(alpha: &[f64], sumlog: &[f64], n: f64, l2: f64) -> (f64, Vec<f64>) {
    let total: f64 = alpha.iter().sum();
    let mut nll = -n * ln_gamma(total) + l2 * alpha.iter().map(|a| a * a).sum::<f64>();
    let mut grad = vec![0.0; alpha.len()];
    let psi_total = digamma(total);
    for (k, &a) in alpha.iter().enumerate() {
        nll += n * ln_gamma(a) - (a - 1.0) * sumlog[k];
        grad[k] = n * (digamma(a) - psi_total) - sumlog[k] + 2.0 * l2 * a;
    }
    (nll, grad)
}

/// One Dirichlet per world variable, parameterized by unconstrained vectors
/// `u` with `alpha = softplus(u)` so the concentrations stay positive.
#[derive(Debug, Clone)]
pub struct DirichletPrior {
    space: SpaceSpec,
    u: Vec<Vec<f64>>,
}

impl DirichletPrior {
    /// Every concentration starts at [`INIT_ALPHA`].
    pub fn new(space: &SpaceSpec) -> Self {
        let u0 = softplus_inv(INIT_ALPHA);
        let u = (0..space.num_vars())
            .map(|i| vec![u0; space.card(i)])
            .collect();
        Self {
            space: space.clone(),
            u,
        }
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn alpha(&self) -> Vec<Vec<f64>> {
        self.u
            .iter()
            .map(|row| row.iter().map(|&u| softplus(u)).collect())
            .collect()
    }

    /// Raw unconstrained parameters of one variable, as stored.
    pub fn u_row(&self, var: usize) -> &[f64] {
        &self.u[var]
    }

    /// Overwrite one variable's raw parameters (used by checkpoint loading).
    pub fn set_u_row(&mut self, var: usize, row: &[f64]) -> Result<(), PriorError> {
        if row.len() != self.space.card(var) {
            return Err(PriorError::BadAlpha(format!(
                "variable {var} has {} options, got {} parameters",
                self.space.card(var),
                row.len()
            )));
        }
        self.u[var] = row.to_vec();
        Ok(())
    }

    /// Overwrite one variable's concentrations.
    pub fn set_alpha(&mut self, var: usize, alpha: &[f64]) -> Result<(), PriorError> {
        if alpha.len() != self.space.card(var) {
            return Err(PriorError::BadAlpha(format!(
                "variable {var} has {} options, got {} concentrations",
                self.space.card(var),
                alpha.len()
            )));
        }
        for &a in alpha {
            if !(a > 0.0 && a.is_finite()) {
                return Err(PriorError::BadAlpha(format!(
                    "concentrations must be positive and finite, got {a}"
                )));
            }
        }
        self.u[var] = alpha.iter().map(|&a| softplus_inv(a)).collect();
        Ok(())
    }

    /// Maximum-likelihood refit against the buffer: `iters` Adam steps at
    /// rate `lr` on the summed negative log-likelihood plus `l2 * |alpha|^2`,
    /// warm-started from the current concentrations with fresh optimizer
    /// state. Returns the loss after each step.
    pub fn fit(
        &mut self,
        buffer: &BeliefBuffer,
        iters: usize,
        lr: f64,
        l2: f64,
    ) -> Result<Vec<f64>, PriorError> {
        if buffer.is_empty() {
            return Err(PriorError::EmptyBuffer);
        }
        for b in buffer.iter() {
            if b.cards() != self.space.cards() {
                return Err(PriorError::SpaceMismatch);
            }
        }
        let n = buffer.len() as f64;

        // per-variable sufficient statistics: summed logs of clamped rows
        let sumlogs: Vec<Vec<f64>> = (0..self.space.num_vars())
            .map(|i| {
                let mut s = vec![0.0; self.space.card(i)];
                for b in buffer.iter() {
                    for (k, p) in clamp_row(b.row(i)).into_iter().enumerate() {
                        s[k] += p.ln();
                    }
                }
                s
            })
            .collect();

        let mut store = ParamStore::new();
        for (i, u) in self.u.iter().enumerate() {
            store.insert(format!("u{i}"), Tensor::vector(u.clone()));
        }

        let mut trace = Vec::with_capacity(iters);
        for _ in 0..iters {
            let mut grads = std::collections::BTreeMap::new();
            for i in 0..self.space.num_vars() {
                let name = format!("u{i}");
                let u = store.get(&name).expect("param inserted above");
                let alpha: Vec<f64> = u.data().iter().map(|&x| softplus(x)).collect();
                let (_, g_alpha) = nll_and_grad(&alpha, &sumlogs[i], n, l2);
                let g_u: Vec<f64> = g_alpha
                    .iter()
                    .zip(u.data())
                    .map(|(g, &x)| g * sigmoid(x))
                    .collect();
                grads.insert(name, Tensor::vector(g_u));
            }
            store
                .adam_step(&grads, lr)
                .expect("analytic gradients are finite");
            let mut loss = 0.0;
            for i in 0..self.space.num_vars() {
                let u = store.get(&format!("u{i}")).expect("param inserted above");
                let alpha: Vec<f64> = u.data().iter().map(|&x| softplus(x)).collect();
                loss += nll_and_grad(&alpha, &sumlogs[i], n, l2).0;
            }
            trace.push(loss);
        }

        for i in 0..self.space.num_vars() {
            self.u[i] = store
                .get(&format!("u{i}"))
                .expect("param inserted above")
                .data()
                .to_vec();
        }
        Ok(trace)
    }

    /// Draw one belief: per variable, normalized Gamma(alpha_k, 1) draws.
    pub fn sample_belief(&self, rng: &mut impl Rng) -> Belief {
        let rows: Vec<Vec<f64>> = self
            .u
            .iter()
            .map(|u_row| {
                let draws: Vec<f64> = u_row
                    .iter()
                    .map(|&u| {
                        let gamma = rand_distr::Gamma::new(softplus(u), 1.0)
                            .expect("softplus output is positive");
                        gamma.sample(rng)
                    })
                    .collect();
                let total: f64 = draws.iter().sum();
                if total > 0.0 && total.is_finite() {
                    draws.into_iter().map(|d| d / total).collect()
                } else {
                    // all-zero underflow; vanishingly rare
                    vec![1.0 / u_row.len() as f64; u_row.len()]
                }
            })
            .collect();
        Belief::new(&self.space, rows).expect("normalized rows form a valid belief")
    }

    /// `log p(P)` of a full belief under the prior: sum of per-variable
    /// Dirichlet log densities, with rows clamped like in fitting.
    pub fn log_pdf(&self, belief: &Belief) -> Result<f64, PriorError> {
        if belief.cards() != self.space.cards() {
            return Err(PriorError::SpaceMismatch);
        }
        let mut total = 0.0;
        for (i, u_row) in self.u.iter().enumerate() {
            let alpha: Vec<f64> = u_row.iter().map(|&u| softplus(u)).collect();
            let row = clamp_row(belief.row(i));
            let a_total: f64 = alpha.iter().sum();
            total += ln_gamma(a_total);
            for (k, &a) in alpha.iter().enumerate() {
                total += (a - 1.0) * row[k].ln() - ln_gamma(a);
            }
        }
        Ok(total)
    }
}

//! Transducer loss (forward-backward over the alignment lattice) and the
//! token-entropy loss.
//!
//! The loss is -ln of the total probability of all monotone alignments that
//! consume T frames and emit the U target tokens, each alignment ending in
//! the final blank at node (T-1, U). The gradient w.r.t. the lattice
//! log-probabilities comes from alpha/beta occupation probabilities and is
//! injected into the autodiff tape as a custom node.

use serde::{Deserialize, Serialize};

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::model::LatticeGraph;
use crate::numerics::{log_sum_exp, Tensor, Var};

/// Log-probabilities over output classes at every (frame, emitted-prefix)
/// node, stored t-major as a (T*(U+1)) x (|V|+1) matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorLattice {
    t_len: usize,
    u_len: usize,
    n_classes: usize,
    flat: Tensor,
}

impl PosteriorLattice {
    pub fn from_flat(t_len: usize, u_len: usize, n_classes: usize, flat: Tensor) -> Self {
        assert_eq!(flat.rows(), t_len * u_len);
        assert_eq!(flat.cols(), n_classes);
        PosteriorLattice {
            t_len,
            u_len,
            n_classes,
            flat,
        }
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    /// U + 1.
    pub fn u_len(&self) -> usize {
        self.u_len
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn blank_id(&self) -> TokenId {
        self.n_classes - 1
    }

    pub fn node(&self, t: usize, u: usize) -> &[f64] {
        self.flat.row(t * self.u_len + u)
    }

    pub fn flat(&self) -> &Tensor {
        &self.flat
    }
}

fn validate(lattice: &PosteriorLattice, target: &[TokenId]) -> Result<()> {
    if lattice.t_len < 1 {
        return Err(Error::Contract("transducer_loss: T must be >= 1".into()));
    }
    if lattice.u_len != target.len() + 1 {
        return Err(Error::Contract(format!(
            "transducer_loss: lattice U+1={} vs target length {}",
            lattice.u_len,
            target.len()
        )));
    }
    if target.iter().any(|&t| t >= lattice.blank_id()) {
        return Err(Error::Contract(
            "transducer_loss: target contains blank or out-of-range token".into(),
        ));
    }
    Ok(())
}

/// Total alignment log-probability by the forward (alpha) and backward
/// (beta) recursions; the two routes must agree.
pub fn forward_backward_totals(
    lattice: &PosteriorLattice,
    target: &[TokenId],
) -> Result<(f64, f64)> {
    validate(lattice, target)?;
    let alpha = alpha_pass(lattice, target);
    let beta = beta_pass(lattice, target);
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let blank = lattice.blank_id();
    let alpha_total =
        alpha[(t_len - 1) * u_len + (u_len - 1)] + lattice.node(t_len - 1, u_len - 1)[blank];
    Ok((alpha_total, beta[0]))
}

fn alpha_pass(lattice: &PosteriorLattice, target: &[TokenId]) -> Vec<f64> {
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let blank = lattice.blank_id();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * u_len];
    alpha[0] = 0.0;
    for t in 0..t_len {
        for u in 0..u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = log_sum_exp(
                    acc,
                    alpha[(t - 1) * u_len + u] + lattice.node(t - 1, u)[blank],
                );
            }
            if u > 0 {
                acc = log_sum_exp(
                    acc,
                    alpha[t * u_len + (u - 1)] + lattice.node(t, u - 1)[target[u - 1]],
                );
            }
            alpha[t * u_len + u] = acc;
        }
    }
    alpha
}

fn beta_pass(lattice: &PosteriorLattice, target: &[TokenId]) -> Vec<f64> {
    let (t_len, u_len) = (lattice.t_len, lattice.u_len);
    let blank = lattice.blank_id();
    let mut beta = vec![f64::NEG_INFINITY; t_len * u_len];
    for t in (0..t_len).rev() {
        for u in (0..u_len).rev() {
            let node = lattice.node(t, u);
            let mut acc = f64::NEG_INFINITY;
            if t == t_len - 1 && u == u_len - 1 {
                acc = node[blank];
            } else {
                if t + 1 < t_len {
                    acc = log_sum_exp(acc, node[blank] + beta[(t + 1) * u_len + u]);
                }
                if u + 1 < u_len {
                    acc = log_sum_exp(acc, node[target[u]] + beta[t * u_len + (u + 1)]);
                }
            }
            beta[t * u_len + u] = acc;
        }
    }
    beta
}

/// Loss and gradient w.r.t. the lattice log-probabilities.
pub fn transducer_loss(
    lattice: &PosteriorLattice,
    target: &[TokenId],
) -> Result<(f64, Tensor)> {
    validate(lattice, target)?;
    let (t_len, u_len, k) = (lattice.t_len, lattice.u_len, lattice.n_classes);
    let blank = lattice.blank_id();
    let alpha = alpha_pass(lattice, target);
    let beta = beta_pass(lattice, target);
    let log_z = beta[0];
    if !log_z.is_finite() {
        return Err(Error::Numeric("transducer_loss: zero-probability lattice".into()));
    }

    let mut grad = Tensor::zeros(&[t_len * u_len, k]);
    for t in 0..t_len {
        for u in 0..u_len {
            let a = alpha[t * u_len + u];
            if a == f64::NEG_INFINITY {
                continue;
            }
            let node = lattice.node(t, u);
            let row = grad.row_mut(t * u_len + u);
            // Blank transition: advance a frame, or finish at the terminal.
            if t + 1 < t_len {
                let occ = a + node[blank] + beta[(t + 1) * u_len + u] - log_z;
                row[blank] -= occ.exp();
            } else if u == u_len - 1 {
                let occ = a + node[blank] - log_z;
                row[blank] -= occ.exp();
            }
            // Token transition: emit the next target token.
            if u + 1 < u_len {
                let tok = target[u];
                let occ = a + node[tok] + beta[t * u_len + (u + 1)] - log_z;
                row[tok] -= occ.exp();
            }
        }
    }
    Ok((-log_z, grad))
}

/// Compute the loss on a taped forward pass and append its gradient node.
/// Returns the loss value and the scalar variable to run backward from.
pub fn transducer_loss_on_graph(
    lg: &mut LatticeGraph,
    target: &[TokenId],
) -> Result<(f64, Var)> {
    let lattice = lg.to_lattice();
    let (loss, grad) = transducer_loss(&lattice, target)?;
    let var = lg.graph.custom_scalar(lg.lattice, loss, grad)?;
    Ok((loss, var))
}

/// Mean entropy of per-token distributions (rows of probabilities).
pub fn entropy_loss(distributions: &Tensor) -> f64 {
    let rows = distributions.rows();
    if rows == 0 || distributions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in 0..rows {
        for &p in distributions.row(r) {
            if p > 0.0 {
                total -= p * p.ln();
            }
        }
    }
    total / rows as f64
}

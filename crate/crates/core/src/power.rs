//! Water-filling power allocation across the active tone set, plus the
//! uniform baseline split.

use ndarray::Array3;
use thiserror::Error;

use crate::ofdm_im::ActivationMatrix;

#[derive(Debug, Error)]
pub enum PowerError {
    #[error("no active tones to allocate over")]
    EmptyActiveSet,
    #[error("power budget must be non-negative, got {0}")]
    NegativeBudget(f64),
    #[error("gain must be positive and finite, got {0}")]
    BadGain(f64),
}

/// Per-link powers (K x Lb x N, zero on inactive tones) and the water level.
#[derive(Debug, Clone)]
pub struct PowerAllocation {
    pub p: Array3<f64>,
    pub mu: f64,
}

impl PowerAllocation {
    pub fn total(&self) -> f64 {
        self.p.sum()
    }
}

/// Water-filling: p_i = max(0, mu - 1/g_i) over the active links, with the
/// water level mu found by bisection so that sum p_i = pt (relative
/// tolerance 1e-9). `gains` holds the effective channel gains
/// |h_k g_k|^2 / sigma^2; inactive entries are ignored.
pub fn waterfill(
    gains: &Array3<f64>,
    z: &ActivationMatrix,
    n_per_block: usize,
    pt: f64,
) -> Result<PowerAllocation, PowerError> {
    if pt < 0.0 {
        return Err(PowerError::NegativeBudget(pt));
    }
    let (k_dim, lb, n_dim) = gains.dim();
    let mut inv = Vec::new(); // 1/g_i of each active link
    let mut idx = Vec::new();
    for k in 0..k_dim {
        for block in 0..lb {
            for n in 0..n_dim {
                if z.active(k, block, n, n_per_block) {
                    let g = gains[[k, block, n]];
                    if !(g.is_finite() && g > 0.0) {
                        return Err(PowerError::BadGain(g));
                    }
                    inv.push(1.0 / g);
                    idx.push((k, block, n));
                }
            }
        }
    }
    if idx.is_empty() {
        return Err(PowerError::EmptyActiveSet);
    }

    let alloc_total = |mu: f64| -> f64 { inv.iter().map(|&v| (mu - v).max(0.0)).sum() };
    let mut lo = 0.0;
    let mut hi = inv.iter().cloned().fold(0.0, f64::max) + pt;
    debug_assert!(alloc_total(hi) >= pt);
    let tol = 1e-9 * pt.max(f64::MIN_POSITIVE);
    let mut mu = 0.5 * (lo + hi);
    for _ in 0..200 {
        mu = 0.5 * (lo + hi);
        let total = alloc_total(mu);
        if (total - pt).abs() <= tol {
            break;
        }
        if total > pt {
            hi = mu;
        } else {
            lo = mu;
        }
    }

    let mut p = Array3::zeros((k_dim, lb, n_dim));
    for (&(k, block, n), &v) in idx.iter().zip(inv.iter()) {
        p[[k, block, n]] = (mu - v).max(0.0);
    }
    Ok(PowerAllocation { p, mu })
}

/// Equal split of the budget over the active links.
pub fn uniform_active(
    z: &ActivationMatrix,
    n_per_block: usize,
    pt: f64,
) -> Result<PowerAllocation, PowerError> {
    if pt < 0.0 {
        return Err(PowerError::NegativeBudget(pt));
    }
    let (k_dim, nc) = z.z.dim();
    let lb = nc / n_per_block;
    let mut count = 0usize;
    for k in 0..k_dim {
        for block in 0..lb {
            for n in 0..n_per_block {
                if z.active(k, block, n, n_per_block) {
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(PowerError::EmptyActiveSet);
    }
    let share = pt / count as f64;
    let mut p = Array3::zeros((k_dim, lb, n_per_block));
    for k in 0..k_dim {
        for block in 0..lb {
            for n in 0..n_per_block {
                if z.active(k, block, n, n_per_block) {
                    p[[k, block, n]] = share;
                }
            }
        }
    }
    Ok(PowerAllocation { p, mu: share })
}

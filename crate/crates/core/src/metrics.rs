//! Link-quality metrics: per-tone SINR, the Craig-integral pairwise error
//! probability, the three-class union bound on BER, the worst-link
//! surrogate eta, sum rate, and PAPR.

use ndarray::{Array1, Array3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use std::f64::consts::PI;
use std::sync::OnceLock;
use thiserror::Error;

use crate::channel::ChannelRealization;
use crate::config::SystemConfig;
use crate::ofdm_im::{binomial, ActivationMatrix, ImCode};
use crate::sim::SimState;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no active tones")]
    NoActiveTones,
    #[error("non-finite SINR entry at {0:?}")]
    NonFinite((usize, usize, usize)),
    #[error("all-zero waveform")]
    ZeroWaveform,
}

/// Linear SINR per (user, subblock, tone) with the active-entry argmin.
/// Inactive tones carry gamma = 0 and are excluded from the min.
#[derive(Debug, Clone)]
pub struct SinrTensor {
    pub gamma: Array3<f64>,
    /// (k, subblock, tone) of the smallest active entry, lexicographic ties.
    pub argmin: Option<(usize, usize, usize)>,
    pub min: f64,
}

/// Tie tolerance when locating the worst active link.
pub const TIE_TOL: f64 = 1e-9;

/// Evaluate gamma = Z p |h g|^2 / (sum_{j != k} Z p |h g_j|^2 + sigma^2)
/// per active (k, subblock, tone), with g columns from the cascade at the
/// matching global tone.
pub fn sinr(
    cfg: &SystemConfig,
    ch: &ChannelRealization,
    state: &SimState,
    z: &ActivationMatrix,
    p: &Array3<f64>,
) -> SinrTensor {
    let lb = cfg.lb();
    let mut gamma = Array3::zeros((cfg.k, lb, cfg.n));
    let sigma2 = cfg.noise_power_per_tone();
    for block in 0..lb {
        for n in 0..cfg.n {
            let tone = cfg.tone_index(block, n);
            let g = state.cascade(tone);
            // cross gains c[k][j] = h_k . g_j
            for k in 0..cfg.k {
                if !z.active(k, block, n, cfg.n) {
                    continue;
                }
                let h_k = ch.h.index_axis(ndarray::Axis(0), tone - 1);
                let h_k = h_k.index_axis(ndarray::Axis(0), k);
                let mut cross = vec![Complex64::new(0.0, 0.0); cfg.k];
                for j in 0..cfg.k {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for m in 0..cfg.m() {
                        acc += h_k[m] * g[[m, j]];
                    }
                    cross[j] = acc;
                }
                let num = p[[k, block, n]] * cross[k].norm_sqr();
                let mut denom = sigma2;
                for j in 0..cfg.k {
                    if j != k && z.active(j, block, n, cfg.n) {
                        denom += p[[j, block, n]] * cross[j].norm_sqr();
                    }
                }
                gamma[[k, block, n]] = num / denom;
            }
        }
    }
    let (argmin, min) = active_min(&gamma, z, cfg.n);
    SinrTensor { gamma, argmin, min }
}

/// Minimum over active entries with lexicographic tie-breaking at TIE_TOL.
pub fn active_min(
    gamma: &Array3<f64>,
    z: &ActivationMatrix,
    n_per_block: usize,
) -> (Option<(usize, usize, usize)>, f64) {
    let (k_dim, lb, n_dim) = gamma.dim();
    let mut best: Option<(usize, usize, usize)> = None;
    let mut min = f64::INFINITY;
    for k in 0..k_dim {
        for block in 0..lb {
            for n in 0..n_dim {
                if !z.active(k, block, n, n_per_block) {
                    continue;
                }
                let v = gamma[[k, block, n]];
                if v < min - TIE_TOL {
                    min = v;
                    best = Some((k, block, n));
                }
            }
        }
    }
    (best, min)
}

/// The three minimum-distance error classes: squared distances, pair
/// multiplicities, bit-error weights, and the combined positive weights
/// W_c = N_c w_c / (pi q). Multiplicities count class-c neighbors per
/// transmitted codeword, so averaging over the transmitted codeword is
/// already folded in and no further codebook-size division applies;
/// dividing again would shrink the union bound below the simulated BER.
#[derive(Debug, Clone)]
pub struct ErrorClassTable {
    /// beta_c: [Es, d_min^2, Es + d_min^2].
    pub beta: [f64; 3],
    /// Pair multiplicities per the class table.
    pub multiplicity: [f64; 3],
    /// Bit-error weights [d_idx, d_sym, d_idx + d_sym].
    pub weight: [f64; 3],
    /// W_c including the 1/pi of the Craig integral.
    pub big_w: [f64; 3],
    /// Codebook size C(N,V) Ms^V.
    pub codebook: f64,
    pub beta_max: f64,
    pub d_idx: f64,
    pub d_sym: f64,
}

impl ErrorClassTable {
    pub fn new(code: &ImCode) -> Self {
        let es = 1.0;
        let d2 = code.d_min * code.d_min;
        let beta = [es, d2, es + d2];
        let n = code.n as f64;
        let v = code.v as f64;
        let ms = code.ms as f64;
        let multiplicity = [v * (n - v), v * (ms - 1.0), v * (n - v) * (ms - 1.0)];
        // d_idx: exact average Hamming distance between index-bit labels
        // over ordered pairs of distinct legal patterns; d_sym = 1 (Gray).
        let d_idx = average_index_hamming(code);
        let d_sym = 1.0;
        let weight = [d_idx, d_sym, d_idx + d_sym];
        let codebook = binomial(code.n, code.v) as f64 * ms.powi(code.v as i32);
        let q = code.q() as f64;
        let mut big_w = [0.0; 3];
        for c in 0..3 {
            big_w[c] = multiplicity[c] * weight[c] / (PI * q);
        }
        let beta_max = beta.iter().cloned().fold(f64::MIN, f64::max);
        ErrorClassTable {
            beta,
            multiplicity,
            weight,
            big_w,
            codebook,
            beta_max,
            d_idx,
            d_sym,
        }
    }
}

fn average_index_hamming(code: &ImCode) -> f64 {
    let count = code.patterns.len();
    if count < 2 {
        return 0.0;
    }
    let mut total = 0u64;
    let mut pairs = 0u64;
    for a in 0..count {
        for b in 0..count {
            if a == b {
                continue;
            }
            total += ((a ^ b) as u64).count_ones() as u64;
            pairs += 1;
        }
    }
    total as f64 / pairs as f64
}

/// 128-point Gauss-Legendre rule mapped onto [0, pi/2].
fn quadrature() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = 128usize;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n {
            // Newton on P_n from the Chebyshev initial guess
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            for _ in 0..100 {
                let (pn, dpn) = legendre(n, x);
                let dx = pn / dpn;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, dpn) = legendre(n, x);
            nodes[i] = x;
            weights[i] = 2.0 / ((1.0 - x * x) * dpn * dpn);
        }
        // map [-1, 1] -> [0, pi/2]
        let half = PI / 4.0;
        let mapped_nodes: Vec<f64> = nodes.iter().map(|&x| half * (x + 1.0)).collect();
        let mapped_weights: Vec<f64> = weights.iter().map(|&w| w * half).collect();
        (mapped_nodes, mapped_weights)
    })
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}

/// Craig-integral PEP for one class:
/// (1/pi) int_0^{pi/2} exp(-(beta/(4 sin^2 z)) sum_n gamma_n delta_n^2) dz.
/// Lies in [0, 1/2]; equals 1/2 when the exponent is zero.
pub fn pep_class(gammas: &[f64], deltas_sq: &[f64], beta: f64) -> Result<f64, MetricsError> {
    let mut s = 0.0;
    for (g, d) in gammas.iter().zip(deltas_sq.iter()) {
        if !g.is_finite() || *g < 0.0 {
            return Err(MetricsError::NonFinite((0, 0, 0)));
        }
        s += g * d;
    }
    let (nodes, weights) = quadrature();
    let mut acc = 0.0;
    for (&z, &w) in nodes.iter().zip(weights.iter()) {
        let sin2 = z.sin().powi(2);
        acc += w * (-beta * s / (4.0 * sin2)).exp();
    }
    Ok(acc / PI)
}

/// Q-function via the Craig representation (test oracle lives elsewhere;
/// this is the production helper).
pub fn q_function(x: f64) -> f64 {
    let (nodes, weights) = quadrature();
    let mut acc = 0.0;
    for (&z, &w) in nodes.iter().zip(weights.iter()) {
        acc += w * (-x * x / (2.0 * z.sin().powi(2))).exp();
    }
    acc / PI
}

/// Per-tone squared-distance profile for a class: one affected tone, taken
/// as the current worst active tone of the subblock.
fn class_profile(
    sinr: &SinrTensor,
    z: &ActivationMatrix,
    n_per_block: usize,
    k: usize,
    block: usize,
) -> Result<(Vec<f64>, Vec<f64>), MetricsError> {
    let n_dim = sinr.gamma.dim().2;
    let mut gammas = vec![0.0; n_dim];
    let mut worst: Option<usize> = None;
    let mut worst_val = f64::INFINITY;
    for n in 0..n_dim {
        if z.active(k, block, n, n_per_block) {
            let v = sinr.gamma[[k, block, n]];
            gammas[n] = v;
            if v < worst_val {
                worst_val = v;
                worst = Some(n);
            }
        }
    }
    let worst = worst.ok_or(MetricsError::NoActiveTones)?;
    let mut deltas = vec![0.0; n_dim];
    deltas[worst] = 1.0;
    Ok((gammas, deltas))
}

/// Three-class union bound on the BER of user k, subblock `block`:
/// P_b = sum_c W_c int exp(-(beta_c / 4 sin^2 z) sum_n gamma delta^2) dz.
pub fn ber_bound_user(
    sinr: &SinrTensor,
    table: &ErrorClassTable,
    z: &ActivationMatrix,
    n_per_block: usize,
    k: usize,
    block: usize,
) -> Result<f64, MetricsError> {
    let (gammas, deltas) = class_profile(sinr, z, n_per_block, k, block)?;
    let mut acc = 0.0;
    for c in 0..3 {
        // pep includes 1/pi and big_w includes 1/pi; multiply back one pi
        let pep = pep_class(&gammas, &deltas, table.beta[c])?;
        acc += table.big_w[c] * PI * pep;
    }
    Ok(acc)
}

/// Frame-level bound for user k: subblocks are independent and carry the
/// same bit count, so the frame BER is the mean of the subblock bounds.
pub fn ber_bound_frame(
    sinr: &SinrTensor,
    table: &ErrorClassTable,
    z: &ActivationMatrix,
    n_per_block: usize,
    k: usize,
) -> Result<f64, MetricsError> {
    let lb = sinr.gamma.dim().1;
    let mut acc = 0.0;
    for block in 0..lb {
        acc += ber_bound_user(sinr, table, z, n_per_block, k, block)?;
    }
    Ok(acc / lb as f64)
}

/// Worst-link surrogate eta = (min active gamma) / beta_max. The optimizer
/// loss is its negative (up to the constant beta_max).
pub fn worst_link_surrogate(sinr: &SinrTensor, table: &ErrorClassTable) -> Result<f64, MetricsError> {
    if sinr.argmin.is_none() {
        return Err(MetricsError::NoActiveTones);
    }
    Ok(sinr.min / table.beta_max)
}

/// Sum rate (1/Nc) sum over active links of log2(1 + gamma), bits/s/Hz.
pub fn sum_rate(sinr: &SinrTensor, z: &ActivationMatrix, n_per_block: usize) -> f64 {
    let (k_dim, lb, n_dim) = sinr.gamma.dim();
    let nc = lb * n_dim;
    let mut acc = 0.0;
    for k in 0..k_dim {
        for block in 0..lb {
            for n in 0..n_dim {
                if z.active(k, block, n, n_per_block) {
                    acc += (1.0 + sinr.gamma[[k, block, n]]).log2();
                }
            }
        }
    }
    acc / nc as f64
}

/// Peak-to-average power ratio in dB on the `oversample`-times zero-padded
/// waveform (factor 4 is the conventional default).
pub fn papr_db(samples: &[Complex64], oversample: usize) -> Result<f64, MetricsError> {
    if samples.is_empty() || samples.iter().all(|v| v.norm_sqr() == 0.0) {
        return Err(MetricsError::ZeroWaveform);
    }
    let wave: Vec<Complex64> = if oversample <= 1 {
        samples.to_vec()
    } else {
        let n = samples.len();
        let mut spec = samples.to_vec();
        FftPlanner::new().plan_fft_forward(n).process(&mut spec);
        let big = n * oversample;
        let mut padded = vec![Complex64::new(0.0, 0.0); big];
        let half = n / 2;
        padded[..half].copy_from_slice(&spec[..half]);
        padded[big - (n - half)..].copy_from_slice(&spec[half..]);
        FftPlanner::new().plan_fft_inverse(big).process(&mut padded);
        padded
    };
    let powers: Array1<f64> = wave.iter().map(|v| v.norm_sqr()).collect();
    let peak = powers.iter().cloned().fold(0.0, f64::max);
    let mean = powers.sum() / powers.len() as f64;
    Ok(10.0 * (peak / mean).log10())
}

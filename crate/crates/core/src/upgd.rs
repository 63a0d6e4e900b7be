//! The optimizer stack: analytic worst-link SINR gradient, projected
//! gradient descent (fixed-step and backtracking), the T-stage unfolded
//! network with a trainable step-size schedule, its training loop, and
//! dataset generation.

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write as _;
use std::sync::Arc;
use thiserror::Error;

use crate::channel;
use crate::config::SystemConfig;
use crate::metrics::SinrTensor;
use crate::ofdm_im::{ActivationMatrix, ImCode};
use crate::power::waterfill;
use crate::sim::{wrap_phase, PropagationSet, SimState};

#[derive(Debug, Error)]
pub enum UpgdError {
    #[error("no active links in the loss context")]
    NoActiveLinks,
    #[error("step sizes must be strictly positive, got {0}")]
    BadStep(f64),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("schedule file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything one optimization run needs: the channel, the activation
/// pattern, the propagation operators, the power allocation, and the noise
/// floor. Immutable during a run.
#[derive(Debug, Clone)]
pub struct LossContext {
    pub cfg: SystemConfig,
    pub h: Array3<Complex64>,
    pub z: ActivationMatrix,
    pub prop: Arc<PropagationSet>,
    pub p: Array3<f64>,
    pub sigma2: f64,
}

impl LossContext {
    fn state(&self, theta: &Array2<f64>) -> SimState {
        SimState::new(self.prop.clone(), theta.clone())
    }
}

/// Per-stage step sizes of the unfolded network.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub eta: Vec<f64>,
}

impl StepSchedule {
    pub fn new(eta: Vec<f64>) -> Result<Self, UpgdError> {
        if let Some(&bad) = eta.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(UpgdError::BadStep(bad));
        }
        Ok(StepSchedule { eta })
    }

    pub fn constant(eta: f64, t: usize) -> Result<Self, UpgdError> {
        Self::new(vec![eta; t])
    }

    /// Diminishing-step rule η_t = a·r^t — the usual warm start for a
    /// trainable schedule, and already a strong solver on its own.
    pub fn geometric(a: f64, r: f64, t: usize) -> Result<Self, UpgdError> {
        Self::new((0..t).map(|i| a * r.powi(i as i32)).collect())
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    /// One step size per line.
    pub fn save(&self, path: &std::path::Path) -> Result<(), UpgdError> {
        let mut f = std::fs::File::create(path)?;
        for v in &self.eta {
            writeln!(f, "{v:.17e}")?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, UpgdError> {
        let text = std::fs::read_to_string(path)?;
        let mut eta = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: f64 = line.parse().map_err(|e| UpgdError::Parse {
                line: i + 1,
                msg: format!("{e}"),
            })?;
            eta.push(v);
        }
        Self::new(eta)
    }
}

/// Loss −min_active γ plus the worst link's (k, subblock, tone) index.
pub fn loss(ctx: &LossContext, theta: &Array2<f64>) -> Result<(f64, (usize, usize, usize)), UpgdError> {
    let state = ctx.state(theta);
    let s = sinr_of(ctx, &state);
    match s.argmin {
        Some(idx) => Ok((-s.min, idx)),
        None => Err(UpgdError::NoActiveLinks),
    }
}

fn sinr_of(ctx: &LossContext, state: &SimState) -> SinrTensor {
    let cfg = &ctx.cfg;
    let lb = cfg.lb();
    let mut gamma = Array3::zeros((cfg.k, lb, cfg.n));
    for block in 0..lb {
        for n in 0..cfg.n {
            let tone = cfg.tone_index(block, n);
            let g = state.cascade(tone);
            for k in 0..cfg.k {
                if !ctx.z.active(k, block, n, cfg.n) {
                    continue;
                }
                let mut cross = vec![Complex64::new(0.0, 0.0); cfg.k];
                for j in 0..cfg.k {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for m in 0..cfg.m() {
                        acc += ctx.h[[tone - 1, k, m]] * g[[m, j]];
                    }
                    cross[j] = acc;
                }
                let num = ctx.p[[k, block, n]] * cross[k].norm_sqr();
                let mut den = ctx.sigma2;
                for j in 0..cfg.k {
                    if j != k && ctx.z.active(j, block, n, cfg.n) {
                        den += ctx.p[[j, block, n]] * cross[j].norm_sqr();
                    }
                }
                gamma[[k, block, n]] = num / den;
            }
        }
    }
    // Links the water-filler shut off (p = 0) carry no data and have an
    // identically zero SINR; excluding them keeps the worst-link min
    // informative rather than pinned at zero.
    let (argmin, min) = active_min_powered(&gamma, ctx);
    SinrTensor { gamma, argmin, min }
}

fn active_min_powered(
    gamma: &Array3<f64>,
    ctx: &LossContext,
) -> (Option<(usize, usize, usize)>, f64) {
    let (k_dim, lb, n_dim) = gamma.dim();
    let mut best = None;
    let mut min = f64::INFINITY;
    for k in 0..k_dim {
        for block in 0..lb {
            for n in 0..n_dim {
                if !ctx.z.active(k, block, n, ctx.cfg.n) || ctx.p[[k, block, n]] <= 0.0 {
                    continue;
                }
                let v = gamma[[k, block, n]];
                if v < min - crate::metrics::TIE_TOL {
                    min = v;
                    best = Some((k, block, n));
                }
            }
        }
    }
    (best, min)
}

/// Subgradient of the loss −min γ with respect to every phase θ_m^l.
///
/// At the worst link (k*, ℓ*, n*) the quotient rule gives
/// ∂γ = (U ∂W − W ∂U)/U² with W the desired power and U the
/// interference-plus-noise power; each |h g_j|² term differentiates to
/// 2 Re{(h g_j)* h ∂g_j/∂θ}, and the cascade derivative is the rank-one
/// layer split evaluated here through running prefix/suffix products
/// rather than one cascade_partial call per (l, m).
pub fn grad_theta(ctx: &LossContext, theta: &Array2<f64>) -> Result<Array2<f64>, UpgdError> {
    let cfg = &ctx.cfg;
    let state = ctx.state(theta);
    let s = sinr_of(ctx, &state);
    let (k_star, block, n) = s.argmin.ok_or(UpgdError::NoActiveLinks)?;
    let tone = cfg.tone_index(block, n);
    let m_dim = cfg.m();
    let l_dim = cfg.l;

    let g = state.cascade(tone);
    let h: Array1<Complex64> =
        Array1::from_iter((0..m_dim).map(|m| ctx.h[[tone - 1, k_star, m]]));

    // s_j = h · g_j for the desired column and active interferers
    let mut s_vec = vec![Complex64::new(0.0, 0.0); cfg.k];
    for j in 0..cfg.k {
        let mut acc = Complex64::new(0.0, 0.0);
        for m in 0..m_dim {
            acc += h[m] * g[[m, j]];
        }
        s_vec[j] = acc;
    }
    let interferers: Vec<usize> = (0..cfg.k)
        .filter(|&j| j != k_star && ctx.z.active(j, block, n, cfg.n))
        .collect();
    let w_val = ctx.p[[k_star, block, n]] * s_vec[k_star].norm_sqr();
    let mut u_val = ctx.sigma2;
    for &j in &interferers {
        u_val += ctx.p[[j, block, n]] * s_vec[j].norm_sqr();
    }

    // factors A_l = Φ^l W^l; C_l = A_l ... A_1 forward, r_l = h A_L ... A_{l+1}
    // backward, so that h (∂G/∂θ_m^l) e_j = i r_l[m] C_l[m, j].
    let factors: Vec<Array2<Complex64>> = (1..=l_dim).map(|l| state.factor(tone, l)).collect();
    let mut c_prods: Vec<Array2<Complex64>> = Vec::with_capacity(l_dim);
    c_prods.push(factors[0].clone());
    for l in 1..l_dim {
        c_prods.push(factors[l].dot(&c_prods[l - 1]));
    }
    let mut r_prods: Vec<Array1<Complex64>> = vec![Array1::zeros(m_dim); l_dim];
    r_prods[l_dim - 1] = h.clone();
    for l in (1..l_dim).rev() {
        r_prods[l - 1] = r_prods[l].dot(&factors[l]);
    }

    let mut grad = Array2::zeros((l_dim, m_dim));
    let i_unit = Complex64::new(0.0, 1.0);
    for l in 0..l_dim {
        for m in 0..m_dim {
            let rl = r_prods[l][m];
            // ∂W
            let ds = i_unit * rl * c_prods[l][[m, k_star]];
            let dw = ctx.p[[k_star, block, n]] * 2.0 * (s_vec[k_star].conj() * ds).re;
            // ∂U
            let mut du = 0.0;
            for &j in &interferers {
                let dsj = i_unit * rl * c_prods[l][[m, j]];
                du += ctx.p[[j, block, n]] * 2.0 * (s_vec[j].conj() * dsj).re;
            }
            let dgamma = (u_val * dw - w_val * du) / (u_val * u_val);
            grad[[l, m]] = -dgamma;
        }
    }
    Ok(grad)
}

/// Step-size policy for projected gradient descent.
#[derive(Debug, Clone, Copy)]
pub enum StepRule {
    Fixed(f64),
    /// Start at eta0, shrink by the given factor until the Armijo decrease
    /// c·η·‖grad‖² is met; never accepts an increase.
    Backtracking { eta0: f64, shrink: f64, c: f64 },
}

/// One solver run: final phases and the loss after every iteration.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub theta: Array2<f64>,
    pub losses: Vec<f64>,
    pub initial_loss: f64,
}

fn project(theta: &mut Array2<f64>) {
    theta.mapv_inplace(wrap_phase);
}

/// Projected gradient descent with the chosen step rule.
pub fn pgd(
    ctx: &LossContext,
    theta0: &Array2<f64>,
    steps: usize,
    rule: StepRule,
) -> Result<Trajectory, UpgdError> {
    match rule {
        StepRule::Fixed(eta) => {
            let schedule = StepSchedule::constant(eta, steps)?;
            upgd_forward(ctx, theta0, &schedule)
        }
        StepRule::Backtracking { eta0, shrink, c } => {
            if !(eta0 > 0.0 && (0.0..1.0).contains(&shrink)) {
                return Err(UpgdError::BadStep(eta0.min(shrink)));
            }
            let mut theta = theta0.clone();
            project(&mut theta);
            let (mut current, _) = loss(ctx, &theta)?;
            let initial_loss = current;
            let mut losses = Vec::with_capacity(steps);
            for _ in 0..steps {
                let g = grad_theta(ctx, &theta)?;
                let g_norm2: f64 = g.iter().map(|v| v * v).sum();
                let mut eta = eta0;
                let mut accepted = false;
                for _ in 0..50 {
                    let mut cand = &theta - &(eta * &g);
                    project(&mut cand);
                    let (cand_loss, _) = loss(ctx, &cand)?;
                    if cand_loss <= current - c * eta * g_norm2 {
                        theta = cand;
                        current = cand_loss;
                        accepted = true;
                        break;
                    }
                    eta *= shrink;
                }
                // no acceptable step: stay put, loss unchanged
                let _ = accepted;
                losses.push(current);
            }
            Ok(Trajectory {
                theta,
                losses,
                initial_loss,
            })
        }
    }
}

/// Projected gradient descent with sup-norm-normalized, harmonically
/// decaying steps, keeping the best iterate seen. The raw gradient scales
/// with the transmit power, so a fixed step in radians stalls at low power
/// and overshoots at high power; normalizing by the largest component makes
/// every update an `eta0`-radian move regardless of the operating point,
/// and retaining the best iterate tolerates the kinks of the pointwise-min
/// objective. Used where solution quality matters more than matching the
/// fixed-budget unfolded network stage for stage.
pub fn normalized_pgd(
    ctx: &LossContext,
    theta0: &Array2<f64>,
    steps: usize,
    eta0: f64,
) -> Result<Trajectory, UpgdError> {
    if !(eta0 > 0.0) {
        return Err(UpgdError::BadStep(eta0));
    }
    let mut theta = theta0.clone();
    project(&mut theta);
    let (initial_loss, _) = loss(ctx, &theta)?;
    let mut best_loss = initial_loss;
    let mut best = theta.clone();
    let mut losses = Vec::with_capacity(steps);
    for t in 0..steps {
        let g = grad_theta(ctx, &theta)?;
        let gmax = g.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if gmax == 0.0 {
            losses.push(best_loss);
            continue;
        }
        let eta = eta0 / (1.0 + t as f64 / 50.0);
        theta = &theta - &((eta / gmax) * &g);
        project(&mut theta);
        let (l, _) = loss(ctx, &theta)?;
        if l < best_loss {
            best_loss = l;
            best = theta.clone();
        }
        losses.push(best_loss);
    }
    Ok(Trajectory {
        theta: best,
        losses,
        initial_loss,
    })
}

/// The unfolded network forward pass: exactly `schedule.len()` stages,
/// stage t applying θ ← Proj(θ − η^(t)·grad), recording the loss after
/// each stage.
pub fn upgd_forward(
    ctx: &LossContext,
    theta0: &Array2<f64>,
    schedule: &StepSchedule,
) -> Result<Trajectory, UpgdError> {
    let mut theta = theta0.clone();
    project(&mut theta);
    let (initial_loss, _) = loss(ctx, &theta)?;
    let mut losses = Vec::with_capacity(schedule.len());
    for &eta in &schedule.eta {
        let g = grad_theta(ctx, &theta)?;
        theta = &theta - &(eta * &g);
        project(&mut theta);
        let (l, _) = loss(ctx, &theta)?;
        losses.push(l);
    }
    Ok(Trajectory {
        theta,
        losses,
        initial_loss,
    })
}

fn mean_final_loss(
    batch: &[&LossContext],
    theta0: &Array2<f64>,
    schedule: &StepSchedule,
) -> Result<f64, UpgdError> {
    let finals: Result<Vec<f64>, UpgdError> = batch
        .par_iter()
        .map(|ctx| {
            let traj = upgd_forward(ctx, theta0, schedule)?;
            Ok(traj.losses.last().copied().unwrap_or(traj.initial_loss))
        })
        .collect();
    let finals = finals?;
    // fixed reduction order for reproducibility
    Ok(finals.iter().sum::<f64>() / finals.len() as f64)
}

/// Gradient of the mean final loss with respect to each schedule entry,
/// by central finite differences over the T scalars (2T forward passes per
/// sample). Batch members evaluate concurrently; the mean uses a fixed
/// reduction order.
pub fn schedule_grad(
    batch: &[&LossContext],
    theta0: &Array2<f64>,
    schedule: &StepSchedule,
) -> Result<Vec<f64>, UpgdError> {
    if batch.is_empty() {
        return Err(UpgdError::EmptyDataset);
    }
    let t = schedule.len();
    // evaluate every (stage, sign) perturbation concurrently; each inner
    // mean keeps its fixed reduction order for reproducibility
    let results: Result<Vec<(f64, f64, f64)>, UpgdError> = (0..t)
        .into_par_iter()
        .map(|stage| {
            let delta = (1e-3 * schedule.eta[stage]).max(1e-6);
            let mut plus = schedule.clone();
            plus.eta[stage] += delta;
            let mut minus = schedule.clone();
            minus.eta[stage] = (minus.eta[stage] - delta).max(1e-9);
            let actual = plus.eta[stage] - minus.eta[stage];
            let lp = mean_final_loss(batch, theta0, &plus)?;
            let lm = mean_final_loss(batch, theta0, &minus)?;
            Ok((lp, lm, actual))
        })
        .collect();
    Ok(results?
        .into_iter()
        .map(|(lp, lm, actual)| (lp - lm) / actual)
        .collect())
}

/// Training hyperparameters and outcome of one schedule-training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub split: f64,
    pub seed: u64,
    pub train_history: Vec<f64>,
    pub val_history: Vec<f64>,
    pub schedule: StepSchedule,
}

impl TrainRun {
    /// CSV: epoch, train_loss, val_loss.
    pub fn save_history(&self, path: &std::path::Path) -> Result<(), UpgdError> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "epoch,train_loss,val_loss")?;
        for (i, (tr, va)) in self.train_history.iter().zip(&self.val_history).enumerate() {
            writeln!(f, "{},{tr:.12e},{va:.12e}", i + 1)?;
        }
        Ok(())
    }
}

/// Train the step schedule with hand-rolled adaptive-moment updates
/// (decay 0.9/0.999, epsilon 1e−8) on finite-difference gradients,
/// projecting every step size to [1e−6, ∞). The dataset splits
/// train/validation at `split`; histories record the mean final loss on
/// each side per epoch. The returned schedule is the checkpoint with the
/// best validation loss (the untrained initializer included), so a run
/// whose final epochs drift never hands back something worse than its
/// best intermediate state. Deterministic under `seed`.
pub fn train_schedule(
    dataset: &[LossContext],
    init: &StepSchedule,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    split: f64,
    seed: u64,
) -> Result<TrainRun, UpgdError> {
    if dataset.is_empty() {
        return Err(UpgdError::EmptyDataset);
    }
    let n_train = ((dataset.len() as f64) * split).round() as usize;
    let n_train = n_train.clamp(1, dataset.len());
    let (train, val) = dataset.split_at(n_train);
    let theta0 = Array2::zeros((dataset[0].cfg.l, dataset[0].cfg.m()));

    let mut schedule = init.clone();
    let t = schedule.len();
    let mut m1 = vec![0.0; t];
    let mut m2 = vec![0.0; t];
    let mut step_count = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_history = Vec::with_capacity(epochs);
    let mut val_history = Vec::with_capacity(epochs);

    let val_refs: Vec<&LossContext> = if val.is_empty() {
        train.iter().collect()
    } else {
        val.iter().collect()
    };
    let mut best_val = mean_final_loss(&val_refs, &theta0, &schedule)?;
    let mut best_schedule = schedule.clone();

    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size.max(1)) {
            let batch: Vec<&LossContext> = chunk.iter().map(|&i| &train[i]).collect();
            let g = schedule_grad(&batch, &theta0, &schedule)?;
            step_count += 1;
            let b1 = 0.9f64;
            let b2 = 0.999f64;
            let bc1 = 1.0 - b1.powi(step_count as i32);
            let bc2 = 1.0 - b2.powi(step_count as i32);
            for i in 0..t {
                m1[i] = b1 * m1[i] + (1.0 - b1) * g[i];
                m2[i] = b2 * m2[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                schedule.eta[i] =
                    (schedule.eta[i] - learning_rate * mhat / (vhat.sqrt() + 1e-8)).max(1e-6);
            }
        }
        let tr_refs: Vec<&LossContext> = train.iter().collect();
        train_history.push(mean_final_loss(&tr_refs, &theta0, &schedule)?);
        let va = mean_final_loss(&val_refs, &theta0, &schedule)?;
        val_history.push(va);
        if va < best_val {
            best_val = va;
            best_schedule = schedule.clone();
        }
    }

    Ok(TrainRun {
        epochs,
        batch_size,
        learning_rate,
        split,
        seed,
        train_history,
        val_history,
        schedule: best_schedule,
    })
}

/// Draw `count` independent loss contexts: fresh channel, random user
/// bitstreams (hence a random activation pattern), and a water-filled
/// power allocation evaluated at the zero-phase cascade.
pub fn gen_dataset(cfg: &SystemConfig, count: usize, seed: u64) -> Result<Vec<LossContext>, UpgdError> {
    let geom = crate::sim::SimGeometry::from_config(cfg);
    let prop = Arc::new(crate::sim::build_propagation(cfg, &geom));
    let code = ImCode::from_config(cfg).map_err(|e| UpgdError::Parse {
        line: 0,
        msg: format!("{e}"),
    })?;
    let sigma2 = cfg.noise_power_per_tone();
    let pt = crate::config::dbm_to_watts(cfg.pt);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let ctx_seed = seed.wrapping_add(i as u64);
        let ch = channel::generate(cfg, ctx_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx_seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut rows = Vec::with_capacity(cfg.k);
        for k in 0..cfg.k {
            let bits: Vec<u8> = (0..code.q() * cfg.lb())
                .map(|_| rng.gen::<bool>() as u8)
                .collect();
            let (z_row, _) = code.encode_user(&bits, cfg.nc).map_err(|e| UpgdError::Parse {
                line: k,
                msg: format!("{e}"),
            })?;
            rows.push(z_row);
        }
        let z = ActivationMatrix {
            z: Array2::from_shape_fn((cfg.k, cfg.nc), |(k, t)| rows[k][t]),
        };
        // effective gains at θ = 0
        let state = SimState::zeros(prop.clone());
        let mut gains = Array3::zeros((cfg.k, cfg.lb(), cfg.n));
        for block in 0..cfg.lb() {
            for n in 0..cfg.n {
                let tone = cfg.tone_index(block, n);
                let g = state.cascade(tone);
                for k in 0..cfg.k {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for m in 0..cfg.m() {
                        acc += ch.h[[tone - 1, k, m]] * g[[m, k]];
                    }
                    gains[[k, block, n]] = acc.norm_sqr() / sigma2;
                }
            }
        }
        let alloc = waterfill(&gains, &z, cfg.n, pt).map_err(|e| UpgdError::Parse {
            line: i,
            msg: format!("{e}"),
        })?;
        out.push(LossContext {
            cfg: cfg.clone(),
            h: ch.h,
            z,
            prop: prop.clone(),
            p: alloc.p,
            sigma2,
        });
    }
    Ok(out)
}

/// The per-iteration operation-count terms and the total scaling
/// Nc·T·(L·M² + K²·M).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopEstimate {
    pub cascade: f64,
    pub sinr: f64,
    pub update: f64,
    pub total: f64,
}

pub fn flop_estimate(cfg: &SystemConfig) -> FlopEstimate {
    let m = cfg.m() as f64;
    let l = cfg.l as f64;
    let k = cfg.k as f64;
    let nc = cfg.nc as f64;
    let t = cfg.t as f64;
    let cascade = l * m * m;
    let sinr = k * k * m;
    let update = l * m;
    FlopEstimate {
        cascade,
        sinr,
        update,
        total: nc * t * (cascade + sinr),
    }
}

//! The stacked metasurface device: Rayleigh-Sommerfeld inter-layer
//! propagation, diagonal phase layers, the per-tone cascade precoder G(i),
//! and its exact derivative w.r.t. any single phase.

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use std::f64::consts::{PI, TAU};
use std::sync::{Arc, OnceLock};
use thiserror::Error;

use crate::config::{SystemConfig, C};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("phase file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Atom grid and feed-antenna placement. Layers 2..L share one geometry;
/// the S feeds sit on a centered line one layer-spacing behind layer 1.
#[derive(Debug, Clone)]
pub struct SimGeometry {
    pub mx: usize,
    pub mz: usize,
    pub s: usize,
    /// Intra-layer atom spacing, m.
    pub rm: f64,
    /// Axial inter-layer spacing, m.
    pub spacing: f64,
    /// Meta-atom area, m^2.
    pub sm: f64,
}

impl SimGeometry {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        SimGeometry {
            mx: cfg.mx,
            mz: cfg.mz,
            s: cfg.s(),
            rm: cfg.rm,
            spacing: cfg.layer_spacing(),
            sm: cfg.sm,
        }
    }

    pub fn m(&self) -> usize {
        self.mx * self.mz
    }

    /// In-plane (x, z) coordinates of atom `m`, grid centered on the axis.
    pub fn atom_position(&self, m: usize) -> (f64, f64) {
        let mx = m / self.mz;
        let mz = m % self.mz;
        (
            (mx as f64 - (self.mx as f64 - 1.0) / 2.0) * self.rm,
            (mz as f64 - (self.mz as f64 - 1.0) / 2.0) * self.rm,
        )
    }

    /// In-plane (x, z) coordinates of feed antenna `s`, spacing rm*Mx/S.
    pub fn feed_position(&self, s: usize) -> (f64, f64) {
        let pitch = self.rm * self.mx as f64 / self.s as f64;
        ((s as f64 - (self.s as f64 - 1.0) / 2.0) * pitch, 0.0)
    }

    /// Distance between atom m on one layer and atom m' on the previous.
    pub fn inter_distance(&self, m: usize, m_prime: usize) -> f64 {
        let (x1, z1) = self.atom_position(m);
        let (x2, z2) = self.atom_position(m_prime);
        (self.spacing.powi(2) + (x1 - x2).powi(2) + (z1 - z2).powi(2)).sqrt()
    }

    /// Distance between atom m on layer 1 and feed antenna s.
    pub fn feed_distance(&self, m: usize, s: usize) -> f64 {
        let (x1, z1) = self.atom_position(m);
        let (x2, z2) = self.feed_position(s);
        (self.spacing.powi(2) + (x1 - x2).powi(2) + (z1 - z2).powi(2)).sqrt()
    }
}

/// Rayleigh-Sommerfeld transmission coefficient for propagation distance
/// `t` at frequency `f`: (Sm dm / t^2)(1/(2 pi t) - j f/c) e^{j 2 pi t f/c}.
pub fn rs_coefficient(sm: f64, dm: f64, t: f64, f: f64) -> Result<Complex64, SimError> {
    if !(t > 0.0) {
        return Err(SimError::Geometry(format!("distance t = {t} must be > 0")));
    }
    let amp = sm * dm / (t * t);
    let lobe = Complex64::new(1.0 / (2.0 * PI * t), -f / C);
    Ok(amp * lobe * Complex64::from_polar(1.0, 2.0 * PI * t * f / C))
}

/// Per-tone propagation matrices. W depends only on geometry and tone
/// frequency, never on phases. Layers 2..L share `inter`.
#[derive(Debug, Clone)]
pub struct PropagationSet {
    /// feed[i]: M x S, feed antennas to layer 1, tone i (0-based).
    pub feed: Vec<Array2<Complex64>>,
    /// inter[i]: M x M, any layer to the next, tone i (0-based).
    pub inter: Vec<Array2<Complex64>>,
    pub layers: usize,
}

impl PropagationSet {
    /// W^l at tone `i` (0-based). l is 1-based; l = 1 is the feed matrix.
    pub fn layer(&self, i: usize, l: usize) -> &Array2<Complex64> {
        if l == 1 {
            &self.feed[i]
        } else {
            &self.inter[i]
        }
    }
}

/// Fill all W tensors from the Rayleigh-Sommerfeld coefficient at every
/// tone frequency.
pub fn build_propagation(cfg: &SystemConfig, geom: &SimGeometry) -> PropagationSet {
    let m = geom.m();
    let mut feed = Vec::with_capacity(cfg.nc);
    let mut inter = Vec::with_capacity(cfg.nc);
    for i in 1..=cfg.nc {
        let f = cfg.subcarrier_frequency(i).expect("tone in range");
        let mut w1 = Array2::zeros((m, geom.s));
        for row in 0..m {
            for col in 0..geom.s {
                w1[[row, col]] =
                    rs_coefficient(geom.sm, geom.spacing, geom.feed_distance(row, col), f)
                        .expect("positive distance");
            }
        }
        let mut wl = Array2::zeros((m, m));
        for row in 0..m {
            for col in 0..m {
                wl[[row, col]] =
                    rs_coefficient(geom.sm, geom.spacing, geom.inter_distance(row, col), f)
                        .expect("positive distance");
            }
        }
        feed.push(w1);
        inter.push(wl);
    }
    PropagationSet {
        feed,
        inter,
        layers: cfg.l,
    }
}

/// Wrap an angle to [0, 2 pi).
pub fn wrap_phase(theta: f64) -> f64 {
    theta.rem_euclid(TAU)
}

/// The phase tensor theta (L x M) plus the propagation set it modulates.
/// Per-tone cascades are cached and invalidated on any theta write.
#[derive(Debug, Clone)]
pub struct SimState {
    theta: Array2<f64>,
    phases: Array2<Complex64>,
    prop: Arc<PropagationSet>,
    cache: Arc<Vec<OnceLock<Array2<Complex64>>>>,
}

impl SimState {
    pub fn new(prop: Arc<PropagationSet>, theta: Array2<f64>) -> Self {
        let nc = prop.feed.len();
        let theta = theta.mapv(wrap_phase);
        let phases = theta.mapv(|t| Complex64::from_polar(1.0, t));
        SimState {
            theta,
            phases,
            prop,
            cache: Arc::new((0..nc).map(|_| OnceLock::new()).collect()),
        }
    }

    /// All-zero phases (the default optimizer start).
    pub fn zeros(prop: Arc<PropagationSet>) -> Self {
        let m = prop.feed[0].nrows();
        let l = prop.layers;
        Self::new(prop, Array2::zeros((l, m)))
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn prop(&self) -> &Arc<PropagationSet> {
        &self.prop
    }

    /// Replace the phase tensor (wrapped to [0, 2 pi)); drops all caches.
    pub fn set_theta(&mut self, theta: Array2<f64>) {
        let nc = self.prop.feed.len();
        self.theta = theta.mapv(wrap_phase);
        self.phases = self.theta.mapv(|t| Complex64::from_polar(1.0, t));
        self.cache = Arc::new((0..nc).map(|_| OnceLock::new()).collect());
    }

    /// Unit-modulus diagonal entry phi_m^l (l 1-based).
    pub fn phase(&self, l: usize, m: usize) -> Complex64 {
        self.phases[[l - 1, m]]
    }

    /// Phi^l W^l_i as a dense matrix (diagonal-times-dense row scaling).
    pub fn factor(&self, tone: usize, l: usize) -> Array2<Complex64> {
        let w = self.prop.layer(tone - 1, l);
        let mut out = w.clone();
        for (row, mut r) in out.outer_iter_mut().enumerate() {
            let p = self.phases[[l - 1, row]];
            r.mapv_inplace(|v| v * p);
        }
        out
    }

    /// Cascade precoder G(i) = Phi^L W^L ... Phi^1 W^1 at tone i (1-based).
    /// Cached per (state, tone).
    pub fn cascade(&self, tone: usize) -> &Array2<Complex64> {
        self.cache[tone - 1].get_or_init(|| {
            let mut g = self.factor(tone, 1);
            for l in 2..=self.prop.layers {
                g = self.factor(tone, l).dot(&g);
            }
            g
        })
    }

    /// dG(i)/d theta_m^l = j G^(>l) E_m Phi^l W^l_i G^(<l), as a full
    /// M x S matrix. The rank-one structure (only row m of Phi^l W^l
    /// survives E_m) is exploited.
    pub fn cascade_partial(
        &self,
        tone: usize,
        l: usize,
        m: usize,
    ) -> Result<Array2<Complex64>, SimError> {
        let layers = self.prop.layers;
        let mm = self.prop.feed[0].nrows();
        let s = self.prop.feed[0].ncols();
        if l < 1 || l > layers || m >= mm {
            return Err(SimError::Index(format!("(l, m) = ({l}, {m})")));
        }
        // prefix = A_{l-1} ... A_1 applied to the identity (or None for l=1)
        let mut row: Array1<Complex64> = if l == 1 {
            self.factor(tone, 1).row(m).to_owned()
        } else {
            let mut pre = self.factor(tone, 1);
            for ll in 2..l {
                pre = self.factor(tone, ll).dot(&pre);
            }
            self.factor(tone, l).row(m).to_owned().dot(&pre)
        };
        row.mapv_inplace(|v| Complex64::new(0.0, 1.0) * v);
        // column m of the suffix product A_L ... A_{l+1}
        let mut col: Array1<Complex64> = Array1::zeros(mm);
        col[m] = Complex64::new(1.0, 0.0);
        for ll in (l + 1)..=layers {
            col = self.factor(tone, ll).dot(&col);
        }
        let mut out = Array2::zeros((mm, s));
        for i in 0..mm {
            for j in 0..s {
                out[[i, j]] = col[i] * row[j];
            }
        }
        Ok(out)
    }
}

/// Write theta as a text matrix: L rows, M whitespace-separated radians.
pub fn dump_phases(theta: &Array2<f64>, path: &std::path::Path) -> Result<(), SimError> {
    let mut out = String::new();
    for row in theta.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a phase tensor; every row must have the same width.
pub fn load_phases(path: &std::path::Path) -> Result<Array2<f64>, SimError> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split_whitespace().map(|v| v.parse()).collect();
        rows.push(row.map_err(|_| SimError::Format(format!("bad value at line {}", idx + 1)))?);
    }
    if rows.is_empty() {
        return Err(SimError::Format("empty phase file".into()));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(SimError::Format("ragged rows".into()));
    }
    let l = rows.len();
    Ok(Array2::from_shape_vec((l, m), rows.concat()).expect("shape checked"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> SystemConfig {
        SystemConfig {
            mx: 2,
            mz: 2,
            k: 2,
            l: 3,
            nc: 4,
            n: 2,
            v: 1,
            ..Default::default()
        }
    }

    fn random_state(cfg: &SystemConfig, seed: u64) -> SimState {
        let geom = SimGeometry::from_config(cfg);
        let prop = Arc::new(build_propagation(cfg, &geom));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = Array2::from_shape_fn((cfg.l, cfg.m()), |_| rng.gen::<f64>() * TAU);
        SimState::new(prop, theta)
    }

    #[test]
    fn rs_coefficient_modulus_identity() {
        let cfg = tiny_cfg();
        let dm = cfg.layer_spacing();
        let f = 28e9;
        let w = rs_coefficient(cfg.sm, dm, dm, f).unwrap();
        let expect = cfg.sm * dm / dm.powi(2) * ((1.0 / (2.0 * PI * dm)).powi(2) + (f / C).powi(2)).sqrt();
        assert_relative_eq!(w.norm(), expect, max_relative = 1e-12);
    }

    #[test]
    fn rs_coefficient_linear_in_area() {
        let cfg = tiny_cfg();
        let dm = cfg.layer_spacing();
        let a = rs_coefficient(cfg.sm, dm, dm * 1.5, 28e9).unwrap();
        let b = rs_coefficient(2.0 * cfg.sm, dm, dm * 1.5, 28e9).unwrap();
        assert_relative_eq!(b.re, 2.0 * a.re, max_relative = 1e-12);
        assert_relative_eq!(b.im, 2.0 * a.im, max_relative = 1e-12);
    }

    #[test]
    fn rs_coefficient_scalar_oracle() {
        // Independent scalar re-evaluation for facing atoms at 28 GHz.
        let cfg = tiny_cfg();
        let dm = cfg.layer_spacing();
        let t = dm;
        let f = 28e9;
        let amp = cfg.sm * dm / (t * t);
        let re_part = 1.0 / (2.0 * PI * t);
        let im_part = -f / C;
        let arg = 2.0 * PI * t * f / C;
        let oracle = Complex64::new(
            amp * (re_part * arg.cos() + im_part * -arg.sin()),
            amp * (re_part * arg.sin() + im_part * arg.cos()),
        );
        let got = rs_coefficient(cfg.sm, dm, t, f).unwrap();
        assert_relative_eq!(got.re, oracle.re, max_relative = 1e-12);
        assert_relative_eq!(got.im, oracle.im, max_relative = 1e-12);
        assert!(rs_coefficient(cfg.sm, dm, 0.0, f).is_err());
    }

    #[test]
    fn propagation_spot_entry_matches_scalar_oracle() {
        let cfg = tiny_cfg();
        let geom = SimGeometry::from_config(&cfg);
        let prop = build_propagation(&cfg, &geom);
        let f = cfg.subcarrier_frequency(1).unwrap();
        // inter-layer entry (m=1, m'=3)
        let t = geom.inter_distance(1, 3);
        let expect = rs_coefficient(geom.sm, geom.spacing, t, f).unwrap();
        let got = prop.inter[0][[1, 3]];
        assert_relative_eq!(got.re, expect.re, max_relative = 1e-12);
        assert_relative_eq!(got.im, expect.im, max_relative = 1e-12);
        // feed entry
        let tf = geom.feed_distance(2, 1);
        let expectf = rs_coefficient(geom.sm, geom.spacing, tf, f).unwrap();
        assert_relative_eq!(prop.feed[0][[2, 1]].re, expectf.re, max_relative = 1e-12);
    }

    #[test]
    fn inter_layer_matrices_identical_across_layers() {
        // geometry identical for layers 2..L, so one shared matrix is exact
        let cfg = tiny_cfg();
        let geom = SimGeometry::from_config(&cfg);
        let prop = build_propagation(&cfg, &geom);
        assert!(std::ptr::eq(prop.layer(0, 2), prop.layer(0, 3)));
    }

    #[test]
    fn zero_phases_reduce_to_plain_product() {
        let cfg = tiny_cfg();
        let geom = SimGeometry::from_config(&cfg);
        let prop = Arc::new(build_propagation(&cfg, &geom));
        let state = SimState::zeros(prop.clone());
        for tone in 1..=cfg.nc {
            let mut expect = prop.feed[tone - 1].clone();
            for _ in 2..=cfg.l {
                expect = prop.inter[tone - 1].dot(&expect);
            }
            let got = state.cascade(tone);
            for (a, b) in got.iter().zip(expect.iter()) {
                assert_relative_eq!(a.re, b.re, max_relative = 1e-12);
                assert_relative_eq!(a.im, b.im, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn constant_layer_offset_is_global_phase() {
        let cfg = tiny_cfg();
        let state = random_state(&cfg, 5);
        let c = 0.7;
        let mut shifted = state.theta().clone();
        for m in 0..cfg.m() {
            shifted[[1, m]] += c;
        }
        let mut state2 = state.clone();
        state2.set_theta(shifted);
        let rot = Complex64::from_polar(1.0, c);
        let g1 = state.cascade(1);
        let g2 = state2.cascade(1);
        for (a, b) in g1.iter().zip(g2.iter()) {
            let expect = a * rot;
            assert_relative_eq!(b.re, expect.re, epsilon = 1e-12 + 1e-9 * expect.norm());
            assert_relative_eq!(b.im, expect.im, epsilon = 1e-12 + 1e-9 * expect.norm());
        }
    }

    #[test]
    fn cascade_matches_hand_product_l2() {
        // L=2, M=2, S=1: multiply the 2x2 factors by hand.
        let cfg = SystemConfig {
            mx: 2,
            mz: 1,
            k: 1,
            l: 2,
            nc: 4,
            n: 2,
            v: 1,
            ..Default::default()
        };
        let state = random_state(&cfg, 11);
        let a1 = state.factor(1, 1); // 2x1
        let a2 = state.factor(1, 2); // 2x2
        let expect = [
            a2[[0, 0]] * a1[[0, 0]] + a2[[0, 1]] * a1[[1, 0]],
            a2[[1, 0]] * a1[[0, 0]] + a2[[1, 1]] * a1[[1, 0]],
        ];
        let g = state.cascade(1);
        for (row, e) in expect.iter().enumerate() {
            assert_relative_eq!(g[[row, 0]].re, e.re, max_relative = 1e-12);
            assert_relative_eq!(g[[row, 0]].im, e.im, max_relative = 1e-12);
        }
    }

    #[test]
    fn unit_modulus_diagonal() {
        let cfg = tiny_cfg();
        let state = random_state(&cfg, 2);
        let mut det_mag = 1.0;
        for m in 0..cfg.m() {
            det_mag *= state.phase(2, m).norm();
        }
        assert_relative_eq!(det_mag, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn cascade_partial_matches_finite_differences() {
        // keystone: central differences over random small instances
        let cfg = SystemConfig {
            mx: 4,
            mz: 2,
            k: 2,
            l: 3,
            nc: 4,
            n: 2,
            v: 1,
            ..Default::default()
        };
        let eps = 1e-6;
        for seed in 0..5u64 {
            let state = random_state(&cfg, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..6 {
                let l = 1 + rng.gen_range(0..cfg.l);
                let m = rng.gen_range(0..cfg.m());
                let tone = 1 + rng.gen_range(0..cfg.nc);
                let analytic = state.cascade_partial(tone, l, m).unwrap();

                let mut tp = state.theta().clone();
                tp[[l - 1, m]] += eps;
                let mut tm = state.theta().clone();
                tm[[l - 1, m]] -= eps;
                let mut sp = state.clone();
                sp.set_theta(tp);
                let mut sm = state.clone();
                sm.set_theta(tm);
                let gp = sp.cascade(tone).clone();
                let gm = sm.cascade(tone).clone();
                for ((a, p), q) in analytic.iter().zip(gp.iter()).zip(gm.iter()) {
                    let fd = (p - q) / (2.0 * eps);
                    let scale = a.norm().max(1e-30);
                    assert!(
                        (a - fd).norm() / scale < 1e-6,
                        "tone {tone} l {l} m {m}: analytic {a}, fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn cascade_partial_single_layer() {
        // L=1: dG/dtheta_m = j E_m Phi^1 W^1
        let cfg = SystemConfig {
            mx: 2,
            mz: 2,
            k: 2,
            l: 1,
            nc: 4,
            n: 2,
            v: 1,
            ..Default::default()
        };
        let state = random_state(&cfg, 9);
        let a1 = state.factor(1, 1);
        let d = state.cascade_partial(1, 1, 2).unwrap();
        for row in 0..cfg.m() {
            for col in 0..cfg.s() {
                let expect = if row == 2 {
                    Complex64::new(0.0, 1.0) * a1[[row, col]]
                } else {
                    Complex64::new(0.0, 0.0)
                };
                assert_relative_eq!(d[[row, col]].re, expect.re, epsilon = 1e-15);
                assert_relative_eq!(d[[row, col]].im, expect.im, epsilon = 1e-15);
            }
        }
        assert!(state.cascade_partial(1, 2, 0).is_err());
        assert!(state.cascade_partial(1, 1, cfg.m()).is_err());
    }

    #[test]
    fn phase_file_roundtrip() {
        let theta = Array2::from_shape_fn((3, 4), |(l, m)| (l * 4 + m) as f64 * 0.3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phases.txt");
        dump_phases(&theta, &path).unwrap();
        let back = load_phases(&path).unwrap();
        assert_eq!(back.dim(), (3, 4));
        for (a, b) in theta.iter().zip(back.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }
}

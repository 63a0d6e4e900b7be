//! Wideband tapped-delay-line channel between the last metasurface layer
//! and each user: planar-array steering vectors, seeded path generation,
//! and per-tone channel realization.

use ndarray::{Array1, Array2, Array3};
use num_complex::Complex64;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

use crate::config::{dbi_to_linear, SystemConfig, C};

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("angle out of range: {0}")]
    AngleOutOfRange(String),
    #[error("channel file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One resolvable propagation path.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    /// Complex gain, linear.
    pub gain: Complex64,
    /// Delay, seconds.
    pub delay: f64,
    /// Elevation, [0, pi).
    pub elevation: f64,
    /// Azimuth, [-pi/2, pi/2].
    pub azimuth: f64,
}

/// The taps of every user's channel.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    /// paths[k] holds the P_k taps of user k.
    pub paths: Vec<Vec<Path>>,
}

/// Per-tone channel rows h_k(i), stacked as H: Nc x K x M.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    pub h: Array3<Complex64>,
    pub paths: PathSet,
    pub seed: u64,
}

/// Planar-array steering vector alpha = alpha_x (x) alpha_z at frequency `f`.
///
/// Entries have unit magnitude by construction. The Kronecker ordering
/// places the x index as the outer (slow) axis.
pub fn steering_vector(
    cfg: &SystemConfig,
    elevation: f64,
    azimuth: f64,
    f: f64,
) -> Result<Array1<Complex64>, ChannelError> {
    if !(0.0..PI).contains(&elevation) {
        return Err(ChannelError::AngleOutOfRange(format!(
            "elevation {elevation} not in [0, pi)"
        )));
    }
    if !(-PI / 2.0..=PI / 2.0).contains(&azimuth) {
        return Err(ChannelError::AngleOutOfRange(format!(
            "azimuth {azimuth} not in [-pi/2, pi/2]"
        )));
    }
    let kx = 2.0 * PI * cfg.rm * elevation.sin() * azimuth.sin() * f / C;
    let kz = 2.0 * PI * cfg.rm * elevation.cos() * f / C;
    let mut alpha = Array1::zeros(cfg.m());
    for mx in 0..cfg.mx {
        let px = kx * mx as f64;
        for mz in 0..cfg.mz {
            let pz = kz * mz as f64;
            alpha[mx * cfg.mz + mz] = Complex64::from_polar(1.0, px + pz);
        }
    }
    Ok(alpha)
}

/// Free-space log-distance path gain (linear), exponent 2.2, with BS/UE
/// antenna gains folded in.
pub fn pathloss(cfg: &SystemConfig, distance: f64) -> f64 {
    let lambda_term = (C / (4.0 * PI * cfg.f0)).powi(2);
    dbi_to_linear(cfg.gain_bs_dbi) * dbi_to_linear(cfg.gain_ue_dbi) * lambda_term
        / distance.powf(2.2)
}

/// BS-to-user distance for the fixed deployment: BS at 10 m height, users
/// on a street 250 m away, spaced 30 m apart and centered on boresight.
pub fn user_distance(cfg: &SystemConfig, user: usize) -> f64 {
    let offset = (user as f64 - (cfg.k as f64 - 1.0) / 2.0) * 30.0;
    (10.0f64.powi(2) + 250.0f64.powi(2) + offset.powi(2)).sqrt()
}

/// Draw a seeded PathSet: `cfg.num_paths` taps per user, delays uniform in
/// [0, delay_spread_frac * Ncp/Bw], complex Gaussian gains with an
/// exponentially decaying power profile normalized to the user's path gain.
pub fn draw_paths(cfg: &SystemConfig, rng: &mut ChaCha8Rng) -> PathSet {
    let max_delay = cfg.delay_spread_frac * cfg.ncp as f64 / cfg.bw;
    // last tap power_decay_db below the first
    let decay = 10f64.powf(-cfg.power_decay_db / 10.0);
    let p = cfg.num_paths;
    let profile: Vec<f64> = (0..p)
        .map(|i| {
            if p == 1 {
                1.0
            } else {
                decay.powf(i as f64 / (p as f64 - 1.0))
            }
        })
        .collect();
    let profile_sum: f64 = profile.iter().sum();

    let mut paths = Vec::with_capacity(cfg.k);
    for user in 0..cfg.k {
        let target = pathloss(cfg, user_distance(cfg, user));
        let mut user_paths = Vec::with_capacity(p);
        for prof in &profile {
            // E|g|^2 = prof/profile_sum * target
            let sigma = (prof / profile_sum * target / 2.0).sqrt();
            let re: f64 = rng.sample::<f64, _>(StdNormal) * sigma;
            let im: f64 = rng.sample::<f64, _>(StdNormal) * sigma;
            user_paths.push(Path {
                gain: Complex64::new(re, im),
                delay: rng.gen::<f64>() * max_delay,
                elevation: rng.gen::<f64>() * PI * 0.999_999,
                azimuth: (rng.gen::<f64>() - 0.5) * PI,
            });
        }
        paths.push(user_paths);
    }
    PathSet { paths }
}

// Box-Muller standard normal; keeps rand_distr out of the dependency set.
pub(crate) struct StdNormal;
impl rand::distributions::Distribution<f64> for StdNormal {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }
}

/// Expected total tap power per user (the normalization target), for tests.
pub fn expected_tap_power(cfg: &SystemConfig, user: usize) -> f64 {
    pathloss(cfg, user_distance(cfg, user))
}

/// Evaluate h_k(i) = sum_p g_p e^{-j2pi f_i tau_p} alpha_p(i)^H per tone
/// and stack into H: Nc x K x M.
pub fn realize_channel(cfg: &SystemConfig, paths: &PathSet, seed: u64) -> ChannelRealization {
    let m = cfg.m();
    let mut h = Array3::zeros((cfg.nc, cfg.k, m));
    for i in 1..=cfg.nc {
        let f = cfg.subcarrier_frequency(i).expect("tone in range");
        for (k, user_paths) in paths.paths.iter().enumerate() {
            let mut row = Array1::<Complex64>::zeros(m);
            for p in user_paths {
                let alpha =
                    steering_vector(cfg, p.elevation, p.azimuth, f).expect("stored angles valid");
                let phase = Complex64::from_polar(1.0, -2.0 * PI * f * p.delay);
                let w = p.gain * phase;
                // h accumulates g * e^{-j2pi f tau} * alpha^H
                for (dst, a) in row.iter_mut().zip(alpha.iter()) {
                    *dst += w * a.conj();
                }
            }
            h.slice_mut(ndarray::s![i - 1, k, ..]).assign(&row);
        }
    }
    ChannelRealization {
        h,
        paths: paths.clone(),
        seed,
    }
}

/// Draw paths and realize the channel in one seeded step.
pub fn generate(cfg: &SystemConfig, seed: u64) -> ChannelRealization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let paths = draw_paths(cfg, &mut rng);
    realize_channel(cfg, &paths, seed)
}

/// Channel rows at one tone as a K x M matrix view copy.
pub fn tone_matrix(ch: &ChannelRealization, tone: usize) -> Array2<Complex64> {
    ch.h.index_axis(ndarray::Axis(0), tone - 1).to_owned()
}

/// Dump H as text: header `nc k m seed`, then one `re im` pair per line in
/// row-major (tone, user, atom) order.
pub fn dump(ch: &ChannelRealization, path: &std::path::Path) -> Result<(), ChannelError> {
    let (nc, k, m) = ch.h.dim();
    let mut out = format!("{} {} {} {}\n", nc, k, m, ch.seed);
    for v in ch.h.iter() {
        out.push_str(&format!("{:e} {:e}\n", v.re, v.im));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load a channel dump, validating the header shape against `cfg`.
pub fn load(cfg: &SystemConfig, path: &std::path::Path) -> Result<ChannelRealization, ChannelError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or(ChannelError::Format("empty file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 {
        return Err(ChannelError::Format("header must be `nc k m seed`".into()));
    }
    let nc: usize = fields[0].parse().map_err(|_| ChannelError::Format("bad nc".into()))?;
    let k: usize = fields[1].parse().map_err(|_| ChannelError::Format("bad k".into()))?;
    let m: usize = fields[2].parse().map_err(|_| ChannelError::Format("bad m".into()))?;
    let seed: u64 = fields[3].parse().map_err(|_| ChannelError::Format("bad seed".into()))?;
    if nc != cfg.nc || k != cfg.k || m != cfg.m() {
        return Err(ChannelError::Format(format!(
            "shape ({nc},{k},{m}) does not match config ({},{},{})",
            cfg.nc,
            cfg.k,
            cfg.m()
        )));
    }
    let mut data = Vec::with_capacity(nc * k * m);
    for (idx, line) in lines.enumerate() {
        let (re, im) = line
            .split_once(' ')
            .ok_or_else(|| ChannelError::Format(format!("bad entry at line {}", idx + 2)))?;
        let re: f64 = re.parse().map_err(|_| ChannelError::Format(format!("bad re at line {}", idx + 2)))?;
        let im: f64 = im.parse().map_err(|_| ChannelError::Format(format!("bad im at line {}", idx + 2)))?;
        data.push(Complex64::new(re, im));
    }
    if data.len() != nc * k * m {
        return Err(ChannelError::Format(format!(
            "expected {} entries, found {}",
            nc * k * m,
            data.len()
        )));
    }
    let h = Array3::from_shape_vec((nc, k, m), data).expect("length checked");
    Ok(ChannelRealization {
        h,
        paths: PathSet { paths: vec![] },
        seed,
    })
}

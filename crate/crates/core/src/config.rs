//! System configuration: every scalar parameter of the link, derived
//! quantities (subcarrier frequencies, per-tone noise power), validation,
//! and the flat `key = value` config-file format.

use thiserror::Error;

/// Speed of light, m/s.
pub const C: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convert dBm to watts.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Convert watts to dBm.
pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

/// Convert an antenna gain in dBi to a linear power gain.
pub fn dbi_to_linear(dbi: f64) -> f64 {
    10f64.powf(dbi / 10.0)
}

/// All scalar parameters of the transceiver, the metasurface stack, the
/// OFDM-IM codec, and the unfolded optimizer. Immutable after construction;
/// safe to share across workers.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// Carrier frequency, Hz.
    pub f0: f64,
    /// Bandwidth, Hz.
    pub bw: f64,
    /// Subcarrier count.
    pub nc: usize,
    /// Cyclic-prefix length, samples.
    pub ncp: usize,
    /// User count (= transmit antenna count, SDMA).
    pub k: usize,
    /// Meta-atoms per layer along x.
    pub mx: usize,
    /// Meta-atoms per layer along z.
    pub mz: usize,
    /// Metasurface layer count.
    pub l: usize,
    /// Total stack thickness, m.
    pub dm_total: f64,
    /// Intra-layer atom spacing, m.
    pub rm: f64,
    /// Meta-atom area, m^2.
    pub sm: f64,
    /// Total transmit power budget, dBm.
    pub pt: f64,
    /// Noise power spectral density, W/Hz.
    pub n0: f64,
    /// Base-station antenna gain, dBi.
    pub gain_bs_dbi: f64,
    /// User antenna gain, dBi.
    pub gain_ue_dbi: f64,
    /// IM subblock size.
    pub n: usize,
    /// Active tones per subblock.
    pub v: usize,
    /// Constellation order.
    pub ms: usize,
    /// Unfolded stages.
    pub t: usize,
    /// RNG seed.
    pub seed: u64,
    /// Paths per user in the tapped delay line.
    pub num_paths: usize,
    /// Delays are drawn uniformly in [0, delay_spread_frac * Ncp/Bw].
    pub delay_spread_frac: f64,
    /// Power-profile decay: last tap this many dB below the first.
    pub power_decay_db: f64,
}

impl Default for SystemConfig {
    /// The full-size parameter set behind `--scale paper`, for long runs.
    fn default() -> Self {
        let f0 = 28e9;
        SystemConfig {
            f0,
            bw: 60e6,
            nc: 16,
            ncp: 8,
            k: 4,
            mx: 10,
            mz: 10,
            l: 7,
            dm_total: 0.05,
            rm: C / (2.0 * f0),
            sm: (C / (2.0 * f0)).powi(2),
            pt: 10.0,
            n0: dbm_to_watts(-174.0),
            gain_bs_dbi: 3.0,
            gain_ue_dbi: 0.0,
            n: 4,
            v: 2,
            ms: 2,
            t: 30,
            seed: 0,
            num_paths: 10,
            delay_spread_frac: 0.8,
            power_decay_db: 20.0,
        }
    }
}

impl SystemConfig {
    /// The desk-scale shrink: M=16 (4x4), L=3; everything else as default.
    pub fn desk() -> Self {
        SystemConfig {
            mx: 4,
            mz: 4,
            l: 3,
            k: 2,
            // stack thickness shrinks with the aperture so each hop still
            // subtends a wide solid angle and keeps the insertion loss low
            dm_total: 0.01,
            // operate where the worst link is neither noise-buried nor
            // saturated, so the optimizer has something to trade off
            pt: 30.0,
            ..Default::default()
        }
    }

    /// Transmit antenna count; equals the user count under SDMA.
    pub fn s(&self) -> usize {
        self.k
    }

    /// Meta-atoms per layer.
    pub fn m(&self) -> usize {
        self.mx * self.mz
    }

    /// Subblock count.
    pub fn lb(&self) -> usize {
        self.nc / self.n
    }

    /// Subcarrier spacing, Hz.
    pub fn delta_f(&self) -> f64 {
        self.bw / self.nc as f64
    }

    /// Inter-layer spacing, m.
    pub fn layer_spacing(&self) -> f64 {
        self.dm_total / self.l as f64
    }

    /// Frequency of the i-th subcarrier (1-based): f0 + (i - (Nc+1)/2) df.
    pub fn subcarrier_frequency(&self, i: usize) -> Result<f64, ConfigError> {
        if i < 1 || i > self.nc {
            return Err(ConfigError::Invalid(format!(
                "subcarrier index {i} out of range 1..={}",
                self.nc
            )));
        }
        Ok(self.f0 + (i as f64 - (self.nc as f64 + 1.0) / 2.0) * self.delta_f())
    }

    /// Per-tone noise power sigma_w^2 = N0 * delta_f, watts.
    pub fn noise_power_per_tone(&self) -> f64 {
        self.n0 * self.delta_f()
    }

    /// Global tone index (1-based) for subblock `lb` (0-based) and tone `n`
    /// (0-based) within the subblock.
    pub fn tone_index(&self, lb: usize, n: usize) -> usize {
        lb * self.n + n + 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("f0", self.f0),
            ("bw", self.bw),
            ("dm_total", self.dm_total),
            ("rm", self.rm),
            ("sm", self.sm),
        ] {
            if !(v > 0.0) {
                return err(format!("{name} must be strictly positive"));
            }
        }
        if !self.pt.is_finite() {
            return err("pt must be finite".into());
        }
        if self.n0 < 0.0 || !self.n0.is_finite() {
            return err("n0 must be non-negative and finite".into());
        }
        if self.nc == 0 || self.ncp == 0 {
            return err("nc and ncp must be positive".into());
        }
        if self.k == 0 || self.mx == 0 || self.mz == 0 || self.l == 0 {
            return err("k, mx, mz, l must be positive".into());
        }
        if self.n == 0 || self.nc % self.n != 0 {
            return err(format!("Nc not divisible by N ({} % {})", self.nc, self.n));
        }
        if self.v == 0 {
            return err("V must be > 0".into());
        }
        if self.v >= self.n {
            return err("V must be < N".into());
        }
        if self.ms < 2 || !self.ms.is_power_of_two() {
            return err(format!("Ms must be a power of two >= 2, got {}", self.ms));
        }
        if self.num_paths == 0 {
            return err("num_paths must be positive".into());
        }
        if !(self.delay_spread_frac > 0.0 && self.delay_spread_frac < 1.0) {
            return err("delay_spread_frac must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Serialize as flat `key = value` lines (SI units; powers in dBm).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# simstack system configuration\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("f0_hz", format!("{:e}", self.f0));
        kv("bw_hz", format!("{:e}", self.bw));
        kv("nc", self.nc.to_string());
        kv("ncp", self.ncp.to_string());
        kv("k", self.k.to_string());
        kv("mx", self.mx.to_string());
        kv("mz", self.mz.to_string());
        kv("l", self.l.to_string());
        kv("dm_m", format!("{:e}", self.dm_total));
        kv("rm_m", format!("{:e}", self.rm));
        kv("sm_m2", format!("{:e}", self.sm));
        kv("pt_dbm", format!("{}", self.pt));
        kv("n0_dbm_hz", format!("{}", watts_to_dbm(self.n0)));
        kv("gain_bs_dbi", format!("{}", self.gain_bs_dbi));
        kv("gain_ue_dbi", format!("{}", self.gain_ue_dbi));
        kv("n", self.n.to_string());
        kv("v", self.v.to_string());
        kv("ms", self.ms.to_string());
        kv("t", self.t.to_string());
        kv("seed", self.seed.to_string());
        kv("num_paths", self.num_paths.to_string());
        kv("delay_spread_frac", format!("{}", self.delay_spread_frac));
        kv("power_decay_db", format!("{}", self.power_decay_db));
        s
    }

    /// Parse the flat `key = value` format. Unknown keys are rejected;
    /// invariants are validated before returning.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = SystemConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or(ConfigError::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let val = val.trim();
            let fp = |v: &str| -> Result<f64, ConfigError> {
                v.parse().map_err(|_| ConfigError::Parse {
                    line: idx + 1,
                    msg: format!("bad float `{v}` for `{key}`"),
                })
            };
            let ip = |v: &str| -> Result<usize, ConfigError> {
                v.parse().map_err(|_| ConfigError::Parse {
                    line: idx + 1,
                    msg: format!("bad integer `{v}` for `{key}`"),
                })
            };
            match key {
                "f0_hz" => cfg.f0 = fp(val)?,
                "bw_hz" => cfg.bw = fp(val)?,
                "nc" => cfg.nc = ip(val)?,
                "ncp" => cfg.ncp = ip(val)?,
                "k" => cfg.k = ip(val)?,
                "s" => {
                    let s = ip(val)?;
                    if s != cfg.k {
                        return Err(ConfigError::Invalid(format!(
                            "s = {s} must equal k = {} (SDMA)",
                            cfg.k
                        )));
                    }
                }
                "mx" => cfg.mx = ip(val)?,
                "mz" => cfg.mz = ip(val)?,
                "l" => cfg.l = ip(val)?,
                "dm_m" => cfg.dm_total = fp(val)?,
                "rm_m" => cfg.rm = fp(val)?,
                "sm_m2" => cfg.sm = fp(val)?,
                "pt_dbm" => cfg.pt = fp(val)?,
                "n0_dbm_hz" => cfg.n0 = dbm_to_watts(fp(val)?),
                "gain_bs_dbi" => cfg.gain_bs_dbi = fp(val)?,
                "gain_ue_dbi" => cfg.gain_ue_dbi = fp(val)?,
                "n" => cfg.n = ip(val)?,
                "v" => cfg.v = ip(val)?,
                "ms" => cfg.ms = ip(val)?,
                "t" => cfg.t = ip(val)?,
                "seed" => cfg.seed = ip(val)? as u64,
                "num_paths" => cfg.num_paths = ip(val)?,
                "delay_spread_frac" => cfg.delay_spread_frac = fp(val)?,
                "power_decay_db" => cfg.power_decay_db = fp(val)?,
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Stable hash of the full parameter set, for experiment manifests.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

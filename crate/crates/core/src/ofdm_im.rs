//! OFDM-IM codec: bit splitting, index selection, Gray-mapped PSK,
//! activation matrices, time-domain framing, and exhaustive per-subblock
//! maximum-likelihood detection.

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::config::SystemConfig;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("invalid code: {0}")]
    InvalidCode(String),
    #[error("bit length {got}, expected {expected}")]
    BitLength { got: usize, expected: usize },
    #[error("illegal pattern")]
    IllegalPattern,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("activation row sum {got} != V = {v} (user {user}, subblock {subblock})")]
    RowSum {
        got: usize,
        v: usize,
        user: usize,
        subblock: usize,
    },
}

/// Binomial coefficient C(n, k).
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u64 / (i + 1) as u64;
    }
    acc
}

/// One OFDM-IM subblock code: (N, V, Ms) plus the legal-pattern table and
/// the Gray-mapped unit-energy PSK constellation.
///
/// V = N is the degenerate full-tone code (q1 = 0, single pattern); it is
/// what the classical-OFDM baseline uses.
#[derive(Debug, Clone)]
pub struct ImCode {
    pub n: usize,
    pub v: usize,
    pub ms: usize,
    /// Index bits per subblock: floor(log2 C(N, V)).
    pub q1: usize,
    /// Symbol bits per subblock: V log2 Ms.
    pub q2: usize,
    /// Legal activation patterns, 2^q1 distinct V-subsets (ascending tones).
    pub patterns: Vec<Vec<usize>>,
    /// Constellation indexed by Gray bit label.
    pub constellation: Vec<Complex64>,
    /// Minimum constellation spacing (distance, not squared).
    pub d_min: f64,
}

impl ImCode {
    pub fn new(n: usize, v: usize, ms: usize) -> Result<Self, CodecError> {
        if v == 0 || v > n {
            return Err(CodecError::InvalidCode(format!("V = {v} not in 1..=N = {n}")));
        }
        if ms < 2 || !ms.is_power_of_two() {
            return Err(CodecError::InvalidCode(format!("Ms = {ms} not a power of two >= 2")));
        }
        let q1 = (binomial(n, v) as f64).log2().floor() as usize;
        let q2 = v * ms.trailing_zeros() as usize;

        // Table ordering for (4, 2) follows the published selection table;
        // everything else is lexicographic-combinadic.
        let patterns: Vec<Vec<usize>> = if (n, v) == (4, 2) {
            vec![vec![0, 2], vec![1, 3], vec![0, 3], vec![1, 2]]
        } else {
            lexicographic_subsets(n, v, 1 << q1)
        };
        debug_assert_eq!(patterns.len(), 1 << q1);

        // Gray-mapped PSK: position `pos` carries bit label pos ^ (pos >> 1).
        // For Ms = 2 this is BPSK with 0 -> +1, 1 -> -1.
        let mut constellation = vec![Complex64::new(0.0, 0.0); ms];
        for pos in 0..ms {
            let label = pos ^ (pos >> 1);
            let angle = 2.0 * std::f64::consts::PI * pos as f64 / ms as f64;
            constellation[label] = Complex64::from_polar(1.0, angle);
        }
        let mut d_min = f64::INFINITY;
        for a in 0..ms {
            for b in (a + 1)..ms {
                d_min = d_min.min((constellation[a] - constellation[b]).norm());
            }
        }
        Ok(ImCode {
            n,
            v,
            ms,
            q1,
            q2,
            patterns,
            constellation,
            d_min,
        })
    }

    pub fn from_config(cfg: &SystemConfig) -> Result<Self, CodecError> {
        Self::new(cfg.n, cfg.v, cfg.ms)
    }

    /// Bits per subblock: q = q1 + q2.
    pub fn q(&self) -> usize {
        self.q1 + self.q2
    }

    /// Bits per symbol-bit group.
    fn bits_per_symbol(&self) -> usize {
        self.ms.trailing_zeros() as usize
    }

    /// Map q1 index bits to a legal V-subset (ascending tone indices).
    pub fn index_map(&self, bits: &[u8]) -> Result<&[usize], CodecError> {
        if bits.len() != self.q1 {
            return Err(CodecError::BitLength {
                got: bits.len(),
                expected: self.q1,
            });
        }
        Ok(&self.patterns[bits_to_index(bits)])
    }

    /// Inverse of `index_map`; an unlisted subset is an illegal pattern
    /// (the signal the detector uses to discard a candidate).
    pub fn index_unmap(&self, subset: &[usize]) -> Result<Vec<u8>, CodecError> {
        let pos = self
            .patterns
            .iter()
            .position(|p| p.as_slice() == subset)
            .ok_or(CodecError::IllegalPattern)?;
        Ok(index_to_bits(pos, self.q1))
    }

    /// Encode one subblock of q bits into an N-tone sparse vector.
    pub fn encode_subblock(&self, bits: &[u8]) -> Result<Vec<Complex64>, CodecError> {
        if bits.len() != self.q() {
            return Err(CodecError::BitLength {
                got: bits.len(),
                expected: self.q(),
            });
        }
        let active = self.index_map(&bits[..self.q1])?;
        let b = self.bits_per_symbol();
        let mut x = vec![Complex64::new(0.0, 0.0); self.n];
        for (j, &tone) in active.iter().enumerate() {
            let label = bits_to_index(&bits[self.q1 + j * b..self.q1 + (j + 1) * b]);
            x[tone] = self.constellation[label];
        }
        Ok(x)
    }

    /// Encode a user's full frame of q*Lb bits into an activation row and
    /// the sparse frequency-domain symbol vector (length Nc).
    pub fn encode_user(
        &self,
        bits: &[u8],
        nc: usize,
    ) -> Result<(Vec<u8>, Vec<Complex64>), CodecError> {
        let lb = nc / self.n;
        if bits.len() != self.q() * lb {
            return Err(CodecError::BitLength {
                got: bits.len(),
                expected: self.q() * lb,
            });
        }
        let mut z = vec![0u8; nc];
        let mut x = vec![Complex64::new(0.0, 0.0); nc];
        for block in 0..lb {
            let sub = self.encode_subblock(&bits[block * self.q()..(block + 1) * self.q()])?;
            for (n, &v) in sub.iter().enumerate() {
                x[block * self.n + n] = v;
                z[block * self.n + n] = if v.norm_sqr() > 0.0 { 1 } else { 0 };
            }
        }
        Ok((z, x))
    }

    /// Exhaustive ML detection of one subblock: scores all legal-pattern x
    /// symbol candidates by sum_n |y_n - heff_n x_n|^2, ties broken by
    /// smallest candidate index.
    pub fn ml_detect_subblock(
        &self,
        y: &[Complex64],
        heff: &[Complex64],
        _sigma2: f64,
    ) -> Result<(Vec<u8>, Vec<Complex64>), CodecError> {
        if y.len() != self.n || heff.len() != self.n {
            return Err(CodecError::Length(format!(
                "subblock length {} / {}, expected {}",
                y.len(),
                heff.len(),
                self.n
            )));
        }
        let b = self.bits_per_symbol();
        let base: f64 = y.iter().map(|v| v.norm_sqr()).sum();
        let mut best = f64::INFINITY;
        let mut best_bits = Vec::new();
        let mut best_x = vec![Complex64::new(0.0, 0.0); self.n];
        for (pat_idx, active) in self.patterns.iter().enumerate() {
            let mut labels = vec![0usize; self.v];
            loop {
                // metric = base + sum over active tones of the correction
                let mut metric = base;
                for (j, &tone) in active.iter().enumerate() {
                    let x = self.constellation[labels[j]];
                    metric += (y[tone] - heff[tone] * x).norm_sqr() - y[tone].norm_sqr();
                }
                if metric < best {
                    best = metric;
                    let mut bits = index_to_bits(pat_idx, self.q1);
                    for &label in &labels {
                        bits.extend(index_to_bits(label, b));
                    }
                    best_bits = bits;
                    best_x.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
                    for (j, &tone) in active.iter().enumerate() {
                        best_x[tone] = self.constellation[labels[j]];
                    }
                }
                // odometer over the V symbol labels
                let mut j = self.v;
                loop {
                    if j == 0 {
                        break;
                    }
                    j -= 1;
                    labels[j] += 1;
                    if labels[j] < self.ms {
                        break;
                    }
                    labels[j] = 0;
                    if j == 0 {
                        j = usize::MAX;
                        break;
                    }
                }
                if j == usize::MAX {
                    break;
                }
            }
        }
        Ok((best_bits, best_x))
    }

    /// Spectral efficiency K q Lb / (Nc + Ncp), bits/s/Hz.
    pub fn spectral_efficiency(&self, k: usize, nc: usize, ncp: usize) -> f64 {
        let lb = nc / self.n;
        (k * self.q() * lb) as f64 / (nc + ncp) as f64
    }

    /// Per-OFDM-symbol ML candidate count using the C(N,V) Ms^V-per-block
    /// convention (all subsets, not just the 2^q1 legal ones).
    pub fn ml_candidates_per_symbol(&self, nc: usize) -> u64 {
        let lb = (nc / self.n) as u64;
        lb * binomial(self.n, self.v) * (self.ms as u64).pow(self.v as u32)
    }
}

fn bits_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize)
}

fn index_to_bits(mut idx: usize, width: usize) -> Vec<u8> {
    let mut bits = vec![0u8; width];
    for slot in bits.iter_mut().rev() {
        *slot = (idx & 1) as u8;
        idx >>= 1;
    }
    bits
}

/// First `count` V-subsets of {0..n-1} in lexicographic order.
fn lexicographic_subsets(n: usize, v: usize, count: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(count);
    let mut cur: Vec<usize> = (0..v).collect();
    loop {
        out.push(cur.clone());
        if out.len() == count {
            return out;
        }
        // next combination
        let mut i = v;
        loop {
            debug_assert!(i > 0, "ran out of subsets before count");
            i -= 1;
            if cur[i] != i + n - v {
                break;
            }
        }
        cur[i] += 1;
        for j in (i + 1)..v {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

/// Global binary activation matrix Z (K x Nc).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub z: Array2<u8>,
}

impl ActivationMatrix {
    /// Activity of user `k` on tone `n` of subblock `block` (widths of `n_per_block`).
    pub fn active(&self, k: usize, block: usize, n: usize, n_per_block: usize) -> bool {
        self.z[[k, block * n_per_block + n]] == 1
    }

    /// Activity of user `k` on the 0-based global tone.
    pub fn is_active(&self, k: usize, tone0: usize) -> bool {
        self.z[[k, tone0]] == 1
    }
}

/// Stack per-user activation rows, validating per-subblock row sums = V.
pub fn build_activation(
    code: &ImCode,
    rows: &[Vec<u8>],
    nc: usize,
) -> Result<ActivationMatrix, CodecError> {
    let k = rows.len();
    let mut z = Array2::zeros((k, nc));
    for (user, row) in rows.iter().enumerate() {
        if row.len() != nc {
            return Err(CodecError::Length(format!(
                "activation row {} has length {}, expected {nc}",
                user,
                row.len()
            )));
        }
        for block in 0..nc / code.n {
            let sum: usize = row[block * code.n..(block + 1) * code.n]
                .iter()
                .map(|&b| b as usize)
                .sum();
            if sum != code.v {
                return Err(CodecError::RowSum {
                    got: sum,
                    v: code.v,
                    user,
                    subblock: block,
                });
            }
        }
        for (tone, &b) in row.iter().enumerate() {
            z[[user, tone]] = b;
        }
    }
    Ok(ActivationMatrix { z })
}

/// Unitary IDFT plus cyclic prefix: Nc frequency bins -> Nc + Ncp samples.
pub fn frame_to_time(cfg: &SystemConfig, x: &[Complex64]) -> Result<Vec<Complex64>, CodecError> {
    if x.len() != cfg.nc {
        return Err(CodecError::Length(format!(
            "frequency frame length {}, expected {}",
            x.len(),
            cfg.nc
        )));
    }
    let mut buf = x.to_vec();
    FftPlanner::new().plan_fft_inverse(cfg.nc).process(&mut buf);
    let scale = 1.0 / (cfg.nc as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= scale);
    let mut out = Vec::with_capacity(cfg.nc + cfg.ncp);
    out.extend_from_slice(&buf[cfg.nc - cfg.ncp..]);
    out.extend_from_slice(&buf);
    Ok(out)
}

/// Strip the cyclic prefix and apply the unitary DFT.
pub fn time_to_freq(cfg: &SystemConfig, samples: &[Complex64]) -> Result<Vec<Complex64>, CodecError> {
    if samples.len() != cfg.nc + cfg.ncp {
        return Err(CodecError::Length(format!(
            "time frame length {}, expected {}",
            samples.len(),
            cfg.nc + cfg.ncp
        )));
    }
    let mut buf = samples[cfg.ncp..].to_vec();
    FftPlanner::new().plan_fft_forward(cfg.nc).process(&mut buf);
    let scale = 1.0 / (cfg.nc as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= scale);
    Ok(buf)
}

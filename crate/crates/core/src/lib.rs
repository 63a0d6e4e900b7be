//! Link-level simulator and phase optimizer for a stacked-metasurface
//! multiuser MIMO OFDM-IM downlink.
//!
//! The crate is organized around the signal path: [`config`] holds every
//! scalar parameter; [`channel`] draws wideband tapped-delay-line channels;
//! [`sim`] models the metasurface stack and its cascade precoder; [`ofdm_im`]
//! is the index-modulation codec; [`metrics`] computes SINR, the union-bound
//! BER, sum rate, and PAPR; [`power`] allocates transmit power; [`upgd`] is
//! the optimizer stack (analytic gradient, projected gradient descent, and
//! the unfolded network with trainable step sizes); [`baselines`] provides
//! the digital zero-forcing reference transceivers; [`harness`] drives the
//! reproducible experiments behind the `simstack` CLI.

pub mod baselines;
pub mod channel;
pub mod config;
pub mod harness;
pub mod metrics;
pub mod ofdm_im;
pub mod power;
pub mod sim;
pub mod upgd;

pub use config::SystemConfig;

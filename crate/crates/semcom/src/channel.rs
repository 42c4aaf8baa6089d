//! AWGN channel simulation for symbol frames.
//!
//! The main (sender to receiver) and eavesdropper channels are both modeled
//! as `y_hat = H*y + n` with `H` defaulting to the identity and `n` i.i.d.
//! zero-mean Gaussian noise whose per-dimension standard deviation follows
//! from the configured SNR against unit signal power.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::types::SymbolFrame;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("gain matrix is {rows}x{cols}, expected {n}x{n}")]
    GainDimensionMismatch { rows: usize, cols: usize, n: usize },
    #[error("snr must be finite, got {0}")]
    NonFiniteSnr(f64),
}

/// Channel SNR: a finite value in dB, or an explicit noiseless sentinel so
/// that "infinite SNR" comparisons stay bit-exact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Snr {
    Db(f64),
    Noiseless,
}

/// One channel realization: SNR, optional gain matrix, and the noise seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSpec {
    snr: Snr,
    /// Optional real-valued `N x N` channel matrix applied to both the real
    /// and imaginary columns; identity when absent.
    gain: Option<Array2<f64>>,
    seed: u64,
}

impl ChannelSpec {
    pub fn awgn(snr_db: f64, seed: u64) -> Self {
        Self {
            snr: Snr::Db(snr_db),
            gain: None,
            seed,
        }
    }

    pub fn noiseless() -> Self {
        Self {
            snr: Snr::Noiseless,
            gain: None,
            seed: 0,
        }
    }

    pub fn with_gain(mut self, gain: Array2<f64>) -> Self {
        self.gain = Some(gain);
        self
    }

    /// Same channel with a different noise seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self {
            snr: self.snr,
            gain: self.gain.clone(),
            seed,
        }
    }

    pub fn snr(&self) -> Snr {
        self.snr
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Per-real-dimension noise standard deviation for a given SNR in dB against
/// unit mean complex-symbol power: `sigma_d = sqrt(10^(-snr/10) / 2)`, so the
/// total complex-noise power is `10^(-snr/10)`.
pub fn snr_to_noise_std(snr_db: f64) -> f64 {
    (10f64.powf(-snr_db / 10.0) / 2.0).sqrt()
}

/// Applies `H*y + n` to a frame. Reproducible for a fixed spec: the noise
/// is drawn from a generator seeded by `spec.seed`, row-major over symbols
/// with the real dimension first.
pub fn apply_channel(y: &SymbolFrame, spec: &ChannelSpec) -> Result<SymbolFrame, ChannelError> {
    let n = y.num_symbols();
    let mut out = y.clone();

    if let Some(h) = &spec.gain {
        let (rows, cols) = h.dim();
        if rows != n || cols != n {
            return Err(ChannelError::GainDimensionMismatch { rows, cols, n });
        }
        let mixed = h.dot(y.symbols());
        out.symbols_mut().assign(&mixed);
    }

    match spec.snr {
        Snr::Noiseless => Ok(out),
        Snr::Db(snr_db) => {
            if !snr_db.is_finite() {
                return Err(ChannelError::NonFiniteSnr(snr_db));
            }
            let sigma = snr_to_noise_std(snr_db);
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let sym = out.symbols_mut();
            for k in 0..n {
                sym[(k, 0)] += sigma * normal.sample(&mut rng);
                sym[(k, 1)] += sigma * normal.sample(&mut rng);
            }
            Ok(out)
        }
    }
}

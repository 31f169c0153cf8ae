//! Synthetic sequence tasks for the toy network.
//!
//! Every sample is a short token sequence whose rows share one latent vector
//! plus a per-token perturbation, so attention can pool information across
//! tokens. Targets pass the clean tokens through a fixed random linear map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{matmul_nt, Matrix, RngStream};

/// Per-token perturbation around the shared latent.
const TOKEN_SPREAD: f64 = 0.5;
/// Noise standard deviation at timestep `t` is `NOISE_SCALE · t`.
const NOISE_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Input is clean tokens plus Gaussian noise of timestep-dependent
    /// scale; target is the linear map of the clean tokens.
    #[default]
    SyntheticDenoise,
    /// Input is clean tokens; target is `tanh((1 + t) · map(clean))`.
    SyntheticRegression,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::SyntheticDenoise => "synthetic-denoise",
            TaskKind::SyntheticRegression => "synthetic-regression",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-denoise" => Ok(TaskKind::SyntheticDenoise),
            "synthetic-regression" => Ok(TaskKind::SyntheticRegression),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (expected synthetic-denoise or synthetic-regression)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `n_tokens × d_in`
    pub input: Matrix,
    /// Timestep in `[0, 1)`.
    pub t: f64,
    /// `n_tokens × d_out`
    pub target: Matrix,
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub n_tokens: usize,
    /// `d_out × d_in`, entries with variance `1/d_in`.
    pub map: Matrix,
}

impl SyntheticTask {
    pub fn new(
        kind: TaskKind,
        d_in: usize,
        d_out: usize,
        n_tokens: usize,
        rng: &RngStream,
    ) -> Result<Self> {
        if d_in == 0 || d_out == 0 || n_tokens == 0 {
            return Err(Error::Config("task dimensions must be >= 1".into()));
        }
        let mut r = rng.clone();
        let s = 1.0 / (d_in as f64).sqrt();
        let map = Matrix::from_fn(d_out, d_in, |_, _| r.normal() * s);
        Ok(Self {
            kind,
            n_tokens,
            map,
        })
    }

    pub fn d_in(&self) -> usize {
        self.map.cols()
    }

    pub fn d_out(&self) -> usize {
        self.map.rows()
    }

    pub fn sample(&self, rng: &mut RngStream) -> Result<Sample> {
        let (n, d_in) = (self.n_tokens, self.d_in());
        let latent: Vec<f64> = (0..d_in).map(|_| rng.normal()).collect();
        let clean = Matrix::from_fn(n, d_in, |_, j| latent[j] + TOKEN_SPREAD * rng.normal());
        let t = rng.uniform();
        let mapped = matmul_nt(&clean, &self.map)?;
        Ok(match self.kind {
            TaskKind::SyntheticDenoise => {
                let sigma = NOISE_SCALE * t;
                let input = Matrix::from_fn(n, d_in, |i, j| clean[(i, j)] + sigma * rng.normal());
                Sample {
                    input,
                    t,
                    target: mapped,
                }
            }
            TaskKind::SyntheticRegression => Sample {
                input: clean,
                t,
                target: mapped.map(|z| ((1.0 + t) * z).tanh()),
            },
        })
    }

    pub fn batch(&self, size: usize, rng: &mut RngStream) -> Result<Vec<Sample>> {
        (0..size).map(|_| self.sample(rng)).collect()
    }
}

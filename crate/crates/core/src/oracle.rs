//! Finite-`d` Monte Carlo estimate of the first-level projection value.
//!
//! For `g ~ N(0, I_d)` and `w = (-1, …, -1, +1, …, +1)`, the squared
//! distance from `g` to the set `{q : f(q)ᵀw ≥ 0}` is approximated by the
//! first-order candidate `q̂ = g + ν f′(g)∘w` with
//! `ν = max(-f(g)ᵀw, 0)/‖f′(g)‖²`.  As `d → ∞` its mean tends to
//! `(m₂ - m₁²)/(2 dm₂)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationSpec;
use crate::error::{Error, Result};

/// Samples per independently seeded chunk.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub d: usize,
    pub samples: usize,
    pub seed: u64,
    pub polish: bool,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "d = {} must be even and positive",
                self.d
            )));
        }
        if self.samples < 2 {
            return Err(Error::InvalidConfig(format!(
                "samples = {} must be at least 2",
                self.samples
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    /// Sample standard deviation over `√samples`.
    pub stderr: f64,
    /// Draws with `‖f′(g)‖ = 0` or whose candidate needed rescaling.
    pub n_infeasible_fallbacks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Z1Sample {
    pub value: f64,
    pub fallback: bool,
}

fn constraint(act: &ActivationSpec, q: &[f64]) -> f64 {
    let half = q.len() / 2;
    let (neg, pos) = q.split_at(half);
    pos.iter().map(|&x| act.eval(x)).sum::<f64>() - neg.iter().map(|&x| act.eval(x)).sum::<f64>()
}

/// One draw of the projection value at the point `g` (`d = g.len()`).
pub fn sample_z1(act: &ActivationSpec, g: &[f64], polish: bool) -> Result<Z1Sample> {
    if g.is_empty() || g.len() % 2 != 0 {
        return Err(Error::InvalidConfig(format!(
            "d = {} must be even and positive",
            g.len()
        )));
    }
    let fw = constraint(act, g);
    if fw >= 0.0 {
        return Ok(Z1Sample {
            value: 0.0,
            fallback: false,
        });
    }
    let norm2: f64 = g.iter().map(|&x| act.deriv(x).powi(2)).sum();
    if !(norm2 > 0.0) {
        return Ok(Z1Sample {
            value: 0.0,
            fallback: true,
        });
    }
    let nu = -fw / norm2;
    if !polish {
        return Ok(Z1Sample {
            value: nu * nu * norm2,
            fallback: false,
        });
    }
    let half = g.len() / 2;
    let candidate = |nu: f64| -> Vec<f64> {
        g.iter()
            .enumerate()
            .map(|(j, &x)| {
                let w = if j < half { -1.0 } else { 1.0 };
                x + nu * act.deriv(x) * w
            })
            .collect()
    };
    let feasible = |nu: f64| constraint(act, &candidate(nu)) >= 0.0;
    if feasible(nu) {
        return Ok(Z1Sample {
            value: nu * nu * norm2,
            fallback: false,
        });
    }
    let (mut lo, mut hi) = (nu, 2.0 * nu);
    let mut doublings = 0;
    while !feasible(hi) {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Ok(Z1Sample {
                value: nu * nu * norm2,
                fallback: true,
            });
        }
    }
    while hi - lo > 1e-12 * hi {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Z1Sample {
        value: hi * hi * norm2,
        fallback: true,
    })
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    mean: f64,
    m2: f64,
    fallbacks: usize,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if self.n == 0 {
            return Moments {
                fallbacks: self.fallbacks + other.fallbacks,
                ..other
            };
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        Moments {
            n,
            mean: self.mean + delta * other.n as f64 / n as f64,
            m2: self.m2 + other.m2 + delta * delta * (self.n * other.n) as f64 / n as f64,
            fallbacks: self.fallbacks + other.fallbacks,
        }
    }
}

fn run_chunk(act: &ActivationSpec, cfg: &McConfig, chunk: usize) -> Result<Moments> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(chunk as u64);
    let count = CHUNK.min(cfg.samples - chunk * CHUNK);
    let mut g = vec![0.0; cfg.d];
    let mut acc = Moments::default();
    for _ in 0..count {
        for x in g.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let s = sample_z1(act, &g, cfg.polish)?;
        acc.push(s.value);
        acc.fallbacks += usize::from(s.fallback);
    }
    Ok(acc)
}

/// Sample mean and standard error of [`sample_z1`] over `cfg.samples` draws.
///
/// Draws are generated in fixed chunks with their own ChaCha streams and
/// combined in chunk order, so the result does not depend on the thread
/// count.
pub fn mc_estimate(act: &ActivationSpec, cfg: &McConfig) -> Result<McEstimate> {
    cfg.validate()?;
    let chunks = cfg.samples.div_ceil(CHUNK);
    let parts: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|c| run_chunk(act, cfg, c))
        .collect::<Result<_>>()?;
    let total = parts.into_iter().fold(Moments::default(), Moments::merge);
    let var = total.m2 / (total.n - 1) as f64;
    Ok(McEstimate {
        mean: total.mean,
        stderr: (var / total.n as f64).sqrt(),
        n_infeasible_fallbacks: total.fallbacks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub d: usize,
    pub mean: f64,
    pub stderr: f64,
}

/// [`mc_estimate`] at each `d` in ascending `d_list`.
pub fn convergence_study(
    act: &ActivationSpec,
    d_list: &[usize],
    samples: usize,
    seed: u64,
) -> Result<Vec<StudyRow>> {
    if d_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig(format!(
            "d list {d_list:?} is not ascending"
        )));
    }
    d_list
        .iter()
        .map(|&d| {
            let est = mc_estimate(
                act,
                &McConfig {
                    d,
                    samples,
                    seed,
                    polish: false,
                },
            )?;
            Ok(StudyRow {
                d,
                mean: est.mean,
                stderr: est.stderr,
            })
        })
        .collect()
}

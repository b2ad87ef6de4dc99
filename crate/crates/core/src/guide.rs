//! Guide scores `q = log sigmoid(logit(y))` and tilt potentials
//! `G_beta = exp(beta q)`.

use crate::rng::mix64;
use crate::state::{ArgmaxDecoder, JointState, TokenGrid};

/// A scalar head over the answer latent. The built-in guides read only `y`.
pub trait Guide: Send + Sync {
    fn name(&self) -> &str;

    /// Raw logit; must be finite on finite input.
    fn logit(&self, h: &JointState) -> f64;
}

/// `log(1 / (1 + e^-v))` without overflow.
pub fn log_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        -(-v).exp().ln_1p()
    } else {
        v - v.exp().ln_1p()
    }
}

/// `q(h) = log sigmoid(logit(h))`, in `(-inf, 0]`.
pub fn guide_score(guide: &dyn Guide, h: &JointState) -> f64 {
    log_sigmoid(guide.logit(h))
}

/// `exp(beta q(h))`, in `(0, 1]`. The filter works with `beta q` directly.
pub fn potential(guide: &dyn Guide, h: &JointState, beta: f64) -> f64 {
    if beta == 0.0 {
        return 1.0;
    }
    (beta * guide_score(guide, h)).exp()
}

/// Stand-in for a well-trained head: `kappa (2 frac - 1)` where `frac` is
/// the fraction of decoded tokens that match the solution.
#[derive(Clone, Debug)]
pub struct OracleGuide {
    solution: TokenGrid,
    kappa: f64,
    decoder: ArgmaxDecoder,
}

impl OracleGuide {
    pub fn new(solution: TokenGrid, kappa: f64, decoder: ArgmaxDecoder) -> crate::Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(crate::Error::config(format!("oracle guide needs kappa > 0, got {kappa}")));
        }
        Ok(Self {
            solution,
            kappa,
            decoder,
        })
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

pub fn make_oracle_guide(solution: TokenGrid, kappa: f64, decoder: ArgmaxDecoder) -> crate::Result<OracleGuide> {
    OracleGuide::new(solution, kappa, decoder)
}

impl Guide for OracleGuide {
    fn name(&self) -> &str {
        "oracle"
    }

    fn logit(&self, h: &JointState) -> f64 {
        let frac = self.decoder.decode(h).fraction_equal(&self.solution);
        self.kappa * (2.0 * frac - 1.0)
    }
}

/// A guide that cannot discriminate: `c + eps eta(y)` with `eta` a hash of
/// the bits of `y` mapped to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatGuide {
    pub level: f64,
    pub jitter: f64,
}

pub const DEFAULT_FLAT_JITTER: f64 = 0.01;

impl FlatGuide {
    pub fn new(level: f64, jitter: f64) -> crate::Result<Self> {
        if !level.is_finite() || !(jitter.is_finite() && jitter >= 0.0) {
            return Err(crate::Error::config("flat guide needs finite level and jitter >= 0"));
        }
        Ok(Self { level, jitter })
    }
}

pub fn make_flat_guide(level: f64, jitter: f64) -> crate::Result<FlatGuide> {
    FlatGuide::new(level, jitter)
}

/// Deterministic pseudo-noise in `[-1, 1]` keyed on the exact bits of `y`.
pub fn hash_jitter(h: &JointState) -> f64 {
    let mut acc = 0x6A09_E667_F3BC_C908u64;
    for v in h.y.as_slice() {
        acc = mix64(acc ^ v.to_bits());
    }
    (acc >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

impl Guide for FlatGuide {
    fn name(&self) -> &str {
        "flat"
    }

    fn logit(&self, h: &JointState) -> f64 {
        if self.jitter == 0.0 {
            return self.level;
        }
        self.level + self.jitter * hash_jitter(h)
    }
}

/// Wraps a closure over `y` values.
pub struct FnGuide<F> {
    name: String,
    f: F,
}

impl<F> FnGuide<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self { name: name.into(), f }
    }
}

impl<F> Guide for FnGuide<F>
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn logit(&self, h: &JointState) -> f64 {
        (self.f)(h.y.as_slice())
    }
}

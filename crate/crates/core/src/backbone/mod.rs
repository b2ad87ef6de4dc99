//! The deterministic recursive core.
//!
//! A [`Backbone`] is the fixed map `f`. The inner recursion refines the
//! reasoning latent `z` with `M` applications of `f(x + y + z)`; the outer
//! step then reads out a new answer latent `f(y + z_M)`.

mod latin;

use serde::{Deserialize, Serialize};

pub use latin::{enumerate_latin_squares, one_hot_grid, LatinBackbone, LatinParams, LatinTestbed};

use crate::error::{Error, Result};
use crate::state::{JointState, LatentTensor, TokenGrid};

/// A pure map on `L x D` latents.
pub trait Backbone: Send + Sync {
    fn name(&self) -> &str;

    /// `(L, D)` of inputs and outputs.
    fn shape(&self) -> (usize, usize);

    fn apply(&self, u: &LatentTensor) -> LatentTensor;

    /// Global Lipschitz constant when known analytically.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
}

/// One embedded task: input `x`, initial state `h0`, and ground truth when
/// the testbed knows it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub x: LatentTensor,
    pub h0: JointState,
    pub solution: Option<TokenGrid>,
    /// Given cells (`Some(class)`) for puzzle testbeds; empty otherwise.
    #[serde(default)]
    pub clues: Vec<Option<u32>>,
}

impl TaskInstance {
    pub fn check_shape(&self, shape: (usize, usize)) -> Result<()> {
        for actual in [self.x.shape(), self.h0.y.shape(), self.h0.z.shape()] {
            if actual != shape {
                return Err(Error::DimensionMismatch {
                    expected: shape,
                    actual,
                });
            }
        }
        Ok(())
    }

    /// Positions that are not given cells.
    pub fn free_positions(&self, len: usize) -> Vec<usize> {
        (0..len)
            .filter(|&i| self.clues.get(i).copied().flatten().is_none())
            .collect()
    }
}

fn check_inputs(backbone: &dyn Backbone, x: &LatentTensor, h: &JointState, m: usize) -> Result<()> {
    if m == 0 {
        return Err(Error::config("inner depth M must be at least 1"));
    }
    let shape = backbone.shape();
    for actual in [x.shape(), h.y.shape(), h.z.shape()] {
        if actual != shape {
            return Err(Error::DimensionMismatch {
                expected: shape,
                actual,
            });
        }
    }
    Ok(())
}

fn finite_or_diverged(t: LatentTensor, stage: &'static str, step: usize) -> Result<LatentTensor> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NumericDivergence {
            stage,
            step,
            sigma: 0.0,
        })
    }
}

/// Deterministic inner recursion, returning `z_1..z_M`.
pub fn inner_rollout(
    backbone: &dyn Backbone,
    x: &LatentTensor,
    h: &JointState,
    m: usize,
) -> Result<Vec<LatentTensor>> {
    check_inputs(backbone, x, h, m)?;
    let xy = x.add(&h.y);
    let mut out = Vec::with_capacity(m);
    let mut z = h.z.clone();
    for step in 1..=m {
        z = finite_or_diverged(backbone.apply(&xy.add(&z)), "inner rollout", step)?;
        out.push(z.clone());
    }
    Ok(out)
}

/// One deterministic outer step `(y, z) -> (f(y + z_M), z_M)`.
pub fn outer_step(
    backbone: &dyn Backbone,
    x: &LatentTensor,
    h: &JointState,
    m: usize,
) -> Result<JointState> {
    let z_m = inner_rollout(backbone, x, h, m)?
        .pop()
        .expect("inner rollout yields M >= 1 latents");
    let y = finite_or_diverged(backbone.apply(&h.y.add(&z_m)), "outer step", m + 1)?;
    Ok(JointState { y, z: z_m })
}

/// `N`-fold composition of [`outer_step`] starting from `h0`.
pub fn deterministic_recursion(
    backbone: &dyn Backbone,
    x: &LatentTensor,
    h0: &JointState,
    n: usize,
    m: usize,
) -> Result<JointState> {
    let mut h = h0.clone();
    for _ in 0..n {
        h = outer_step(backbone, x, &h, m)?;
    }
    Ok(h)
}

/// `f(u) = p + rho (u - p)`: a contraction with Lipschitz constant exactly
/// `rho` toward the fixed point `p`.
#[derive(Clone, Debug)]
pub struct AffineBackbone {
    rho: f64,
    fixed_point: LatentTensor,
    name: String,
}

impl AffineBackbone {
    pub fn new(rho: f64, fixed_point: LatentTensor) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::config(format!(
                "affine contraction needs 0 <= rho < 1, got {rho}"
            )));
        }
        Ok(Self {
            rho,
            name: format!("affine(rho={rho})"),
            fixed_point,
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn fixed_point(&self) -> &LatentTensor {
        &self.fixed_point
    }
}

/// Convenience constructor mirroring [`AffineBackbone::new`].
pub fn make_affine_backbone(rho: f64, fixed_point: LatentTensor) -> Result<AffineBackbone> {
    AffineBackbone::new(rho, fixed_point)
}

impl Backbone for AffineBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn shape(&self) -> (usize, usize) {
        self.fixed_point.shape()
    }

    fn apply(&self, u: &LatentTensor) -> LatentTensor {
        let p = self.fixed_point.as_slice();
        let values = u
            .as_slice()
            .iter()
            .zip(p)
            .map(|(&ui, &pi)| pi + self.rho * (ui - pi))
            .collect();
        LatentTensor::from_raw(values, u.rows(), u.dim())
    }

    fn lipschitz(&self) -> Option<f64> {
        Some(self.rho)
    }
}

/// Wraps an arbitrary closure as a backbone.
pub struct FnBackbone<F> {
    name: String,
    shape: (usize, usize),
    lipschitz: Option<f64>,
    f: F,
}

impl<F> FnBackbone<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    pub fn new(name: impl Into<String>, shape: (usize, usize), f: F) -> Self {
        Self {
            name: name.into(),
            shape,
            lipschitz: None,
            f,
        }
    }

    pub fn with_lipschitz(mut self, rho: f64) -> Self {
        self.lipschitz = Some(rho);
        self
    }
}

impl<F> Backbone for FnBackbone<F>
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn apply(&self, u: &LatentTensor) -> LatentTensor {
        let out = (self.f)(u.as_slice());
        assert_eq!(out.len(), u.len(), "backbone {} changed the latent size", self.name);
        LatentTensor::from_raw(out, u.rows(), u.dim())
    }

    fn lipschitz(&self) -> Option<f64> {
        self.lipschitz
    }
}

/// Largest `L * D` a testbed accepts.
pub const MAX_LATENT_LEN: usize = 1 << 22;

/// Generator for random tasks on an affine backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTestbed {
    pub rows: usize,
    pub dim: usize,
    pub classes: u32,
    pub rho: f64,
    /// Standard deviation of the random fixed point, `x` and `h0` entries.
    #[serde(default = "default_affine_scale")]
    pub scale: f64,
}

fn default_affine_scale() -> f64 {
    1.0
}

impl AffineTestbed {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.dim == 0 {
            return Err(Error::config("affine testbed shape must be positive"));
        }
        if self.rows.checked_mul(self.dim).is_none_or(|n| n > MAX_LATENT_LEN) {
            return Err(Error::config(format!("affine latent larger than {MAX_LATENT_LEN} entries")));
        }
        crate::state::ArgmaxDecoder::new(self.classes, self.dim)?;
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("affine testbed needs 0 <= rho < 1"));
        }
        Ok(())
    }

    /// The fixed point used by every task in a pool built with `seed`.
    pub fn fixed_point(&self, seed: u64) -> LatentTensor {
        let mut rng = crate::rng::RngStream::new(seed, crate::rng::GENERATOR_TAG, 0, 0).rng();
        let mut v = vec![0.0; self.rows * self.dim];
        crate::rng::fill_standard_normal(&mut rng, &mut v);
        LatentTensor::from_raw(v.iter().map(|x| x * self.scale).collect(), self.rows, self.dim)
    }

    pub fn backbone(&self, seed: u64) -> Result<AffineBackbone> {
        AffineBackbone::new(self.rho, self.fixed_point(seed))
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
        self.validate()?;
        let len = self.rows * self.dim;
        (0..count as u64)
            .map(|id| {
                let mut rng = crate::rng::RngStream::new(seed, crate::rng::GENERATOR_TAG, 1, id).rng();
                let mut draw = || {
                    let mut v = vec![0.0; len];
                    crate::rng::fill_standard_normal(&mut rng, &mut v);
                    LatentTensor::new(v.iter().map(|x| x * self.scale).collect(), self.rows, self.dim)
                };
                let x = draw()?;
                let y = draw()?;
                let z = draw()?;
                Ok(TaskInstance {
                    id,
                    x,
                    h0: JointState { y, z },
                    solution: None,
                    clues: Vec::new(),
                })
            })
            .collect()
    }
}

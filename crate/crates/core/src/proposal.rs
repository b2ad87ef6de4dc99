//! Stochastic proposal kernel: noisy inner rollouts and the noisy outer
//! update. At `sigma = 0` it reduces to [`crate::backbone::outer_step`].

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, RngStream};
use crate::state::{JointState, LatentTensor};

/// Per-step noise law. Only isotropic standard Gaussians ship; the tube
/// bounds need nothing beyond independence, zero mean and a second-moment
/// bound, so another law can slot in here.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    #[default]
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: f64,
    #[serde(default)]
    pub distribution: NoiseDistribution,
}

impl NoiseConfig {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::config(format!("noise scale must be >= 0, got {sigma}")));
        }
        Ok(Self {
            sigma,
            distribution: NoiseDistribution::Gaussian,
        })
    }

    /// `E|xi|^2` for a latent with `len` entries.
    pub fn second_moment(&self, len: usize) -> f64 {
        match self.distribution {
            NoiseDistribution::Gaussian => len as f64,
        }
    }
}

/// One draw from the proposal kernel plus the noisy inner trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: JointState,
    /// `zeta_1..zeta_M`
    pub inner: Vec<LatentTensor>,
}

fn perturb(
    t: LatentTensor,
    noise: &NoiseConfig,
    rng: &mut rand_chacha::ChaCha8Rng,
    buf: &mut [f64],
) -> LatentTensor {
    // every xi is drawn even at sigma = 0 so stream positions do not depend
    // on sigma; the addition is skipped to keep the zero-noise path bitwise
    // identical to the deterministic step
    fill_standard_normal(rng, buf);
    if noise.sigma == 0.0 {
        return t;
    }
    let (rows, dim) = t.shape();
    let values = t
        .into_vec()
        .into_iter()
        .zip(buf.iter())
        .map(|(v, xi)| v + noise.sigma * xi)
        .collect();
    LatentTensor::from_raw(values, rows, dim)
}

/// Draws `xi_0..xi_M` from `stream` and runs
///
/// ```text
/// zeta_1     = f(x + y + z)       + sigma xi_0
/// zeta_{m+1} = f(x + y + zeta_m)  + sigma xi_m,   m = 1..M-1
/// h'         = (f(y + zeta_M) + sigma xi_M, zeta_M)
/// ```
pub fn trajectory_sampler(
    backbone: &dyn Backbone,
    x: &LatentTensor,
    h: &JointState,
    inner_steps: usize,
    noise: &NoiseConfig,
    stream: &RngStream,
) -> Result<Transition> {
    if inner_steps == 0 {
        return Err(Error::config("inner depth M must be at least 1"));
    }
    if !(noise.sigma.is_finite() && noise.sigma >= 0.0) {
        return Err(Error::config(format!("noise scale must be >= 0, got {}", noise.sigma)));
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
    let diverged = |step| Error::NumericDivergence {
        stage: "trajectory sampler",
        step,
        sigma: noise.sigma,
    };

    let mut rng = stream.rng();
    let mut buf = vec![0.0; x.len()];
    let xy = x.add(&h.y);
    let mut inner = Vec::with_capacity(inner_steps);
    let mut zeta = h.z.clone();
    for step in 1..=inner_steps {
        zeta = perturb(backbone.apply(&xy.add(&zeta)), noise, &mut rng, &mut buf);
        if !zeta.is_finite() {
            return Err(diverged(step));
        }
        inner.push(zeta.clone());
    }
    let y = perturb(backbone.apply(&h.y.add(&zeta)), noise, &mut rng, &mut buf);
    if !y.is_finite() {
        return Err(diverged(inner_steps + 1));
    }
    Ok(Transition {
        state: JointState { y, z: zeta },
        inner,
    })
}

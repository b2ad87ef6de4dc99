//! Latin-square completion testbed.
//!
//! Each of the `L = G^2` rows of a latent holds logits over the `C = G`
//! symbols of one cell. The backbone is a single gradient step
//! `f(u) = u - step_size * grad E(u)` on
//!
//! ```text
//! E(u) = w   * sum_{peer pairs i<j} <softmax(u_i), softmax(u_j)>
//!      + lam/2 * sum_{clue cells i}  |u_i - a e_{clue_i}|^2
//!      + mu/2  * |u|^2
//! ```
//!
//! Peers share a row or a column of the grid. The ridge term `mu` keeps the
//! recursion `f(x + y + z)` bounded even though its input sums two or three
//! latents; with the defaults the map contracts near saturated completions.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{deterministic_recursion, Backbone, TaskInstance};
use crate::error::{Error, Result};
use crate::rng::{RngStream, GENERATOR_TAG, PROBE_TAG};
use crate::state::{ArgmaxDecoder, JointState, LatentTensor, TokenGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatinParams {
    /// Grid order `G`; the latent has `L = G^2` rows.
    pub order: usize,
    /// Feature dimension `D >= G`; features past the first `G` only feel the
    /// ridge and tether.
    pub dim: usize,
    pub step_size: f64,
    pub overlap_weight: f64,
    pub ridge: f64,
    pub clue_tether: f64,
    /// Logit scale clue cells are tethered toward.
    pub clue_logit: f64,
}

impl Default for LatinParams {
    fn default() -> Self {
        Self {
            order: 4,
            dim: 4,
            step_size: 0.1,
            overlap_weight: 30.0,
            ridge: 6.0,
            clue_tether: 4.0,
            clue_logit: 3.0,
        }
    }
}

impl LatinParams {
    pub fn cells(&self) -> usize {
        self.order * self.order
    }

    pub fn validate(&self) -> Result<()> {
        if !(3..=4).contains(&self.order) {
            return Err(Error::config(format!(
                "Latin testbed supports orders 3 and 4, got {}",
                self.order
            )));
        }
        if self.dim < self.order {
            return Err(Error::config(format!(
                "Latin testbed needs D >= C ({} < {})",
                self.dim, self.order
            )));
        }
        let positive = [
            ("step_size", self.step_size),
            ("overlap_weight", self.overlap_weight),
            ("ridge", self.ridge),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.clue_tether.is_finite() && self.clue_tether >= 0.0) {
            return Err(Error::config("clue_tether must be non-negative"));
        }
        if !self.clue_logit.is_finite() {
            return Err(Error::config("clue_logit must be finite"));
        }
        Ok(())
    }
}

fn peer_lists(order: usize) -> Vec<Vec<usize>> {
    let cells = order * order;
    (0..cells)
        .map(|i| {
            let (r, c) = (i / order, i % order);
            (0..cells)
                .filter(|&j| j != i && (j / order == r || j % order == c))
                .collect()
        })
        .collect()
}

/// Backbone for one puzzle: the clue cells are baked into the tether.
#[derive(Clone, Debug)]
pub struct LatinBackbone {
    params: LatinParams,
    peers: Vec<Vec<usize>>,
    /// 0-based clue class per cell.
    clue_class: Vec<Option<usize>>,
    name: String,
}

impl LatinBackbone {
    pub fn new(params: LatinParams, clues: &[Option<u32>]) -> Result<Self> {
        params.validate()?;
        let cells = params.cells();
        if !clues.is_empty() && clues.len() != cells {
            return Err(Error::config(format!(
                "clue mask has {} cells, grid has {cells}",
                clues.len()
            )));
        }
        let mut clue_class = vec![None; cells];
        for (i, c) in clues.iter().enumerate() {
            if let Some(k) = *c {
                if k == 0 || k as usize > params.order {
                    return Err(Error::config(format!("clue {k} outside 1..={}", params.order)));
                }
                clue_class[i] = Some(k as usize - 1);
            }
        }
        Ok(Self {
            peers: peer_lists(params.order),
            name: format!("latin{}(step={})", params.order, params.step_size),
            params,
            clue_class,
        })
    }

    pub fn params(&self) -> &LatinParams {
        &self.params
    }

    fn softmax_rows(&self, u: &[f64]) -> Vec<f64> {
        let (c, d) = (self.params.order, self.params.dim);
        let mut p = vec![0.0; self.params.cells() * c];
        for i in 0..self.params.cells() {
            let row = &u[i * d..i * d + c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..c {
                let e = (row[k] - max).exp();
                p[i * c + k] = e;
                total += e;
            }
            p[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= total);
        }
        p
    }

    fn peer_sums(&self, p: &[f64]) -> Vec<f64> {
        let c = self.params.order;
        let mut q = vec![0.0; p.len()];
        for (i, peers) in self.peers.iter().enumerate() {
            for &j in peers {
                for k in 0..c {
                    q[i * c + k] += p[j * c + k];
                }
            }
        }
        q
    }

    fn target(&self, cell: usize, feature: usize) -> Option<f64> {
        self.clue_class[cell].map(|k| if k == feature { self.params.clue_logit } else { 0.0 })
    }

    /// Constraint energy `E(u)`.
    pub fn energy(&self, u: &LatentTensor) -> f64 {
        let d = self.params.dim;
        let s = u.as_slice();
        let p = self.softmax_rows(s);
        let q = self.peer_sums(&p);
        let overlap: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() * 0.5;
        let mut tether = 0.0;
        for cell in 0..self.params.cells() {
            for f in 0..d {
                if let Some(t) = self.target(cell, f) {
                    let diff = s[cell * d + f] - t;
                    tether += diff * diff;
                }
            }
        }
        self.params.overlap_weight * overlap
            + 0.5 * self.params.clue_tether * tether
            + 0.5 * self.params.ridge * u.norm_sq()
    }

    /// `grad E(u)` as a flat vector.
    pub fn gradient(&self, u: &LatentTensor) -> Vec<f64> {
        let (c, d) = (self.params.order, self.params.dim);
        let s = u.as_slice();
        let p = self.softmax_rows(s);
        let q = self.peer_sums(&p);
        let mut g = vec![0.0; s.len()];
        for cell in 0..self.params.cells() {
            let pc = &p[cell * c..(cell + 1) * c];
            let qc = &q[cell * c..(cell + 1) * c];
            let pq: f64 = pc.iter().zip(qc).map(|(a, b)| a * b).sum();
            for f in 0..d {
                let idx = cell * d + f;
                let mut gi = self.params.ridge * s[idx];
                if f < c {
                    gi += self.params.overlap_weight * pc[f] * (qc[f] - pq);
                }
                if let Some(t) = self.target(cell, f) {
                    gi += self.params.clue_tether * (s[idx] - t);
                }
                g[idx] = gi;
            }
        }
        g
    }
}

impl Backbone for LatinBackbone {
    fn name(&self) -> &str {
        &self.name
    }

    fn shape(&self) -> (usize, usize) {
        (self.params.cells(), self.params.dim)
    }

    fn apply(&self, u: &LatentTensor) -> LatentTensor {
        let g = self.gradient(u);
        let step = self.params.step_size;
        let values = u
            .as_slice()
            .iter()
            .zip(&g)
            .map(|(&ui, &gi)| ui - step * gi)
            .collect();
        LatentTensor::from_raw(values, u.rows(), u.dim())
    }
}

/// All Latin squares of order `g` as 1-based row-major token vectors.
pub fn enumerate_latin_squares(g: usize) -> Vec<Vec<u32>> {
    fn fill(g: usize, cell: usize, grid: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if cell == g * g {
            out.push(grid.clone());
            return;
        }
        let (r, c) = (cell / g, cell % g);
        for sym in 1..=g as u32 {
            let clash = (0..c).any(|cc| grid[r * g + cc] == sym)
                || (0..r).any(|rr| grid[rr * g + c] == sym);
            if !clash {
                grid[cell] = sym;
                fill(g, cell + 1, grid, out);
            }
        }
        grid[cell] = 0;
    }
    let mut out = Vec::new();
    fill(g, 0, &mut vec![0; g * g], &mut out);
    out
}

/// Encodes a grid as `scale * one_hot` rows of width `dim`.
pub fn one_hot_grid(grid: &TokenGrid, dim: usize, scale: f64) -> LatentTensor {
    let mut v = vec![0.0; grid.len() * dim];
    for (i, &t) in grid.tokens().iter().enumerate() {
        v[i * dim + t as usize - 1] = scale;
    }
    LatentTensor::from_raw(v, grid.len(), dim)
}

/// Pool generator for Latin completion puzzles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatinTestbed {
    #[serde(flatten)]
    pub params: LatinParams,
    /// Clue counts are drawn uniformly from `clues_min..=clues_max`.
    pub clues_min: usize,
    pub clues_max: usize,
    /// Keep only puzzles with a single completion. Off by default: the
    /// ground truth is the square the clues were drawn from, so the
    /// deterministic recursion can settle on a different valid completion.
    pub unique_only: bool,
}

impl Default for LatinTestbed {
    fn default() -> Self {
        Self {
            params: LatinParams::default(),
            clues_min: 6,
            clues_max: 6,
            unique_only: false,
        }
    }
}

/// Radius of the secant probes run when a pool is generated.
pub const GENERATION_PROBE_RADIUS: f64 = 0.5;
const GENERATION_PROBE_INSTANCES: usize = 8;
const MAX_UNIQUE_ATTEMPTS: usize = 10_000;
/// Latent norm past which a deterministic run counts as divergent.
const DIVERGENCE_NORM: f64 = 1e6;

impl LatinTestbed {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.clues_min > self.clues_max || self.clues_max > self.params.cells() {
            return Err(Error::config(format!(
                "clue range {}..={} invalid for {} cells",
                self.clues_min,
                self.clues_max,
                self.params.cells()
            )));
        }
        Ok(())
    }

    pub fn decoder(&self) -> ArgmaxDecoder {
        ArgmaxDecoder::new(self.params.order as u32, self.params.dim)
            .expect("validated params have D >= C")
    }

    pub fn backbone_for(&self, task: &TaskInstance) -> Result<LatinBackbone> {
        LatinBackbone::new(self.params.clone(), &task.clues)
    }

    /// Builds a task for an explicit solution and clue mask.
    pub fn task(&self, id: u64, solution: &[u32], clues: Vec<Option<u32>>) -> Result<TaskInstance> {
        let (l, d) = (self.params.cells(), self.params.dim);
        Ok(TaskInstance {
            id,
            x: LatentTensor::zeros(l, d),
            h0: JointState::zeros(l, d),
            solution: Some(TokenGrid::new(solution.to_vec(), self.params.order as u32)?),
            clues,
        })
    }

    /// Generates `count` puzzles. The clue cells enter through the backbone
    /// tether, so `x` and `h0` are zero.
    pub fn generate(&self, count: usize, seed: u64) -> Result<Vec<TaskInstance>> {
        self.validate()?;
        let squares = enumerate_latin_squares(self.params.order);
        let cells = self.params.cells();
        (0..count as u64)
            .map(|id| {
                let mut rng = RngStream::new(seed, GENERATOR_TAG, 2, id).rng();
                for _ in 0..MAX_UNIQUE_ATTEMPTS {
                    let square = &squares[rng.random_range(0..squares.len())];
                    let k = rng.random_range(self.clues_min..=self.clues_max);
                    let mut clues = vec![None; cells];
                    for i in sample(&mut rng, cells, k) {
                        clues[i] = Some(square[i]);
                    }
                    if self.unique_only && completions(&squares, &clues) != 1 {
                        continue;
                    }
                    return self.task(id, square, clues);
                }
                Err(Error::config(format!(
                    "no unique-completion puzzle with {}..={} clues after {MAX_UNIQUE_ATTEMPTS} draws",
                    self.clues_min, self.clues_max
                )))
            })
            .collect()
    }

    /// Probes the local Lipschitz constant around deterministic terminal
    /// states of up to eight pool instances, preferring solved ones. Errors
    /// when the recursion diverges or any secant ratio reaches 1.
    pub fn validate_step_size(
        &self,
        pool: &[TaskInstance],
        outer_steps: usize,
        inner_steps: usize,
    ) -> Result<f64> {
        let decoder = self.decoder();
        let mut solved = Vec::new();
        let mut unsolved = Vec::new();
        for task in pool.iter().take(4 * GENERATION_PROBE_INSTANCES) {
            let backbone = self.backbone_for(task)?;
            let h = deterministic_recursion(&backbone, &task.x, &task.h0, outer_steps, inner_steps)
                .map_err(|e| {
                    Error::config(format!(
                        "step size {} diverges on instance {}: {e}",
                        self.params.step_size, task.id
                    ))
                })?;
            if h.y.norm().max(h.z.norm()) > DIVERGENCE_NORM {
                return Err(Error::config(format!(
                    "step size {} diverges on instance {}",
                    self.params.step_size, task.id
                )));
            }
            let ok = task.solution.as_ref() == Some(&decoder.decode(&h));
            if ok { &mut solved } else { &mut unsolved }.push((task, backbone, h));
        }
        solved.extend(unsolved);
        let mut worst: f64 = 0.0;
        for (task, backbone, h) in solved.iter().take(GENERATION_PROBE_INSTANCES) {
            let mut points = vec![h.z.clone()];
            points.extend(super::inner_rollout(backbone, &task.x, h, inner_steps)?);
            let stream = RngStream::new(task.id, PROBE_TAG, 0, 0);
            let rho = crate::diagnostics::empirical_lipschitz(
                backbone,
                &task.x,
                &h.y,
                &points,
                GENERATION_PROBE_RADIUS,
                crate::diagnostics::DEFAULT_PROBES,
                &stream,
            );
            worst = worst.max(rho);
            if let Some(sol) = &task.solution {
                // the saturated completion itself
                let z = one_hot_grid(sol, self.params.dim, self.params.clue_logit);
                let zero = LatentTensor::zeros(z.rows(), z.dim());
                let at_solution = crate::diagnostics::empirical_lipschitz(
                    backbone,
                    &task.x,
                    &zero,
                    &[z],
                    GENERATION_PROBE_RADIUS,
                    crate::diagnostics::DEFAULT_PROBES,
                    &stream.with_id(PROBE_TAG, 1, task.id),
                );
                worst = worst.max(at_solution);
            }
        }
        if worst >= 1.0 {
            return Err(Error::config(format!(
                "step size {} is not contractive near completions (secant ratio {worst:.3})",
                self.params.step_size
            )));
        }
        Ok(worst)
    }
}

fn completions(squares: &[Vec<u32>], clues: &[Option<u32>]) -> usize {
    squares
        .iter()
        .filter(|sq| clues.iter().zip(sq.iter()).all(|(c, s)| c.is_none_or(|v| v == *s)))
        .count()
}

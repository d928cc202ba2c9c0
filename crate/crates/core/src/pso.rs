//! Bounded two-parameter particle swarm optimizer.
//!
//! Each iteration evaluates every particle, refreshes the local and global
//! bests, and then moves the swarm with
//! `v ← w·v + c1·r1·(p − x) + c2·r2·(g − x)`, `x ← x + v`.
//! The inertia `w` decays exponentially with base 0.5 from `inertia_max`
//! down to `inertia_min`.
//!
//! Every particle owns a ChaCha stream derived from the master seed and its
//! index, so results do not depend on whether losses are evaluated serially
//! or on the rayon pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Position = [f64; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PsoError {
    #[error("invalid PSO config: {0}")]
    InvalidConfig(String),
    #[error("invalid bound on dimension {dim}: [{lo}, {hi}]")]
    InvalidBound { dim: usize, lo: f64, hi: f64 },
    #[error("loss of particle {particle} at iteration {iteration} is not finite ({value})")]
    NonFiniteLoss {
        particle: usize,
        iteration: usize,
        value: f64,
    },
}

/// What happens when a particle leaves the box along a dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundKind {
    /// Clamp to `[lo, hi]` and zero that velocity component.
    Clamp,
    /// Periodic coordinate on `[lo, hi)`.
    Wrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
    pub kind: BoundKind,
}

impl Bound {
    pub fn clamp(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            kind: BoundKind::Clamp,
        }
    }

    pub fn wrap(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            kind: BoundKind::Wrap,
        }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        match self.kind {
            BoundKind::Clamp => x >= self.lo && x <= self.hi,
            BoundKind::Wrap => x >= self.lo && x < self.hi,
        }
    }

    /// Displacement from `x` to `target`; the shorter way round for a
    /// periodic coordinate.
    fn delta(&self, x: f64, target: f64) -> f64 {
        let d = target - x;
        match self.kind {
            BoundKind::Clamp => d,
            BoundKind::Wrap => {
                let w = self.width();
                let d = d.rem_euclid(w);
                if d > 0.5 * w {
                    d - w
                } else {
                    d
                }
            }
        }
    }

    /// Brings `x` back inside; returns the new coordinate and whether the
    /// velocity component must be zeroed.
    fn confine(&self, x: f64) -> (f64, bool) {
        match self.kind {
            BoundKind::Clamp if x < self.lo => (self.lo, true),
            BoundKind::Clamp if x > self.hi => (self.hi, true),
            BoundKind::Clamp => (x, false),
            BoundKind::Wrap => {
                let w = (x - self.lo).rem_euclid(self.width());
                let w = if w >= self.width() { 0.0 } else { w };
                (self.lo + w, false)
            }
        }
    }
}

pub type Bounds = [Bound; 2];

fn validate_bounds(bounds: &Bounds) -> Result<(), PsoError> {
    for (dim, b) in bounds.iter().enumerate() {
        if !(b.lo.is_finite() && b.hi.is_finite() && b.lo < b.hi) {
            return Err(PsoError::InvalidBound {
                dim,
                lo: b.lo,
                hi: b.hi,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoConfig {
    pub particle_count: usize,
    pub max_iterations: usize,
    /// Weight on the particle's own best.
    pub c1: f64,
    /// Weight on the swarm best.
    pub c2: f64,
    pub inertia_min: f64,
    pub inertia_max: f64,
    /// Iterations over which the inertia halves.
    pub inertia_half_life: f64,
    pub loss_tolerance: f64,
    pub stall_iterations: usize,
    pub seed: u64,
    /// Evaluate particles on the rayon pool. Does not change results.
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_parallel() -> bool {
    true
}

impl Default for PsoConfig {
    fn default() -> Self {
        Self {
            particle_count: 20,
            max_iterations: 100,
            c1: 1.49,
            c2: 1.49,
            inertia_min: 0.1,
            inertia_max: 1.1,
            inertia_half_life: 20.0,
            loss_tolerance: 1e-6,
            stall_iterations: 20,
            seed: 0,
            parallel: true,
        }
    }
}

impl PsoConfig {
    pub fn validate(&self) -> Result<(), PsoError> {
        let bad = |m: &str| Err(PsoError::InvalidConfig(m.to_string()));
        if self.particle_count < 2 {
            return bad("particle_count must be >= 2");
        }
        if self.max_iterations < 1 {
            return bad("max_iterations must be >= 1");
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return bad("c1 and c2 must be positive");
        }
        if !(self.inertia_min >= 0.0 && self.inertia_min <= self.inertia_max) {
            return bad("need 0 <= inertia_min <= inertia_max");
        }
        if !(self.inertia_half_life > 0.0) {
            return bad("inertia_half_life must be positive");
        }
        if !(self.loss_tolerance > 0.0) {
            return bad("loss_tolerance must be positive");
        }
        if self.stall_iterations < 1 {
            return bad("stall_iterations must be >= 1");
        }
        Ok(())
    }

    /// Inertia weight applied in velocity update `j` (0-based).
    pub fn inertia(&self, j: usize) -> f64 {
        (self.inertia_max * 0.5_f64.powf(j as f64 / self.inertia_half_life))
            .clamp(self.inertia_min, self.inertia_max)
    }
}

#[derive(Debug, Clone)]
pub struct Particle {
    pub position: Position,
    pub velocity: Position,
    pub best_position: Position,
    pub best_loss: f64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct SwarmState {
    pub particles: Vec<Particle>,
    pub global_best_position: Position,
    pub global_best_loss: f64,
    /// Evaluation rounds completed (the initial evaluation counts as one).
    pub iteration: usize,
    /// Global best loss after each evaluation round.
    pub loss_history: Vec<f64>,
}

impl SwarmState {
    fn refresh_global_best(&mut self) {
        // strict `<` keeps the lowest index on ties
        let mut best = 0;
        for (i, p) in self.particles.iter().enumerate().skip(1) {
            if p.best_loss < self.particles[best].best_loss {
                best = i;
            }
        }
        if self.particles[best].best_loss < self.global_best_loss {
            self.global_best_loss = self.particles[best].best_loss;
            self.global_best_position = self.particles[best].best_position;
        }
    }
}

fn evaluate<F>(
    positions: &[Position],
    loss_fn: &F,
    parallel: bool,
    iteration: usize,
) -> Result<Vec<f64>, PsoError>
where
    F: Fn(&Position) -> f64 + Sync,
{
    let losses: Vec<f64> = if parallel {
        positions.par_iter().map(loss_fn).collect()
    } else {
        positions.iter().map(loss_fn).collect()
    };
    if let Some((particle, &value)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite()) {
        return Err(PsoError::NonFiniteLoss {
            particle,
            iteration,
            value,
        });
    }
    Ok(losses)
}

fn particle_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Scatters `cfg.particle_count` particles uniformly in `bounds`, with
/// velocities uniform in `±(hi − lo)`, and evaluates them once.
pub fn init_swarm<F>(loss_fn: &F, bounds: &Bounds, cfg: &PsoConfig) -> Result<SwarmState, PsoError>
where
    F: Fn(&Position) -> f64 + Sync,
{
    cfg.validate()?;
    validate_bounds(bounds)?;
    let mut particles: Vec<Particle> = (0..cfg.particle_count)
        .map(|i| {
            let mut rng = particle_rng(cfg.seed, i);
            let position = bounds.map(|b| b.confine(rng.random_range(b.lo..b.hi)).0);
            let velocity = bounds.map(|b| rng.random_range(-b.width()..b.width()));
            Particle {
                position,
                velocity,
                best_position: position,
                best_loss: f64::INFINITY,
                rng,
            }
        })
        .collect();
    let positions: Vec<Position> = particles.iter().map(|p| p.position).collect();
    let losses = evaluate(&positions, loss_fn, cfg.parallel, 1)?;
    for (p, l) in particles.iter_mut().zip(losses) {
        p.best_loss = l;
    }
    let mut state = SwarmState {
        global_best_position: particles[0].position,
        global_best_loss: f64::INFINITY,
        particles,
        iteration: 1,
        loss_history: Vec::new(),
    };
    state.refresh_global_best();
    state.loss_history.push(state.global_best_loss);
    Ok(state)
}

/// One velocity/position update followed by an evaluation round.
pub fn step_swarm<F>(
    mut state: SwarmState,
    loss_fn: &F,
    bounds: &Bounds,
    cfg: &PsoConfig,
) -> Result<SwarmState, PsoError>
where
    F: Fn(&Position) -> f64 + Sync,
{
    let w = cfg.inertia(state.iteration - 1);
    let g = state.global_best_position;
    for p in state.particles.iter_mut() {
        for d in 0..2 {
            let r1: f64 = p.rng.random();
            let r2: f64 = p.rng.random();
            let x = p.position[d];
            p.velocity[d] = w * p.velocity[d]
                + cfg.c1 * r1 * bounds[d].delta(x, p.best_position[d])
                + cfg.c2 * r2 * bounds[d].delta(x, g[d]);
            let (nx, stop) = bounds[d].confine(x + p.velocity[d]);
            p.position[d] = nx;
            if stop {
                p.velocity[d] = 0.0;
            }
        }
    }
    let iteration = state.iteration + 1;
    let positions: Vec<Position> = state.particles.iter().map(|p| p.position).collect();
    let losses = evaluate(&positions, loss_fn, cfg.parallel, iteration)?;
    for (p, l) in state.particles.iter_mut().zip(losses) {
        if l < p.best_loss {
            p.best_loss = l;
            p.best_position = p.position;
        }
    }
    state.refresh_global_best();
    state.iteration = iteration;
    state.loss_history.push(state.global_best_loss);
    Ok(state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    MaxIterations,
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsoOutcome {
    pub best_position: Position,
    pub best_loss: f64,
    pub loss_history: Vec<f64>,
    pub termination: Termination,
}

impl PsoOutcome {
    pub fn iterations(&self) -> usize {
        self.loss_history.len()
    }
}

/// True once the best loss improved by less than `loss_tolerance` over the
/// last `stall_iterations` rounds.
fn stalled(history: &[f64], cfg: &PsoConfig) -> bool {
    let n = history.len();
    n > cfg.stall_iterations
        && history[n - 1 - cfg.stall_iterations] - history[n - 1] < cfg.loss_tolerance
}

pub fn pso_minimize<F>(loss_fn: F, bounds: &Bounds, cfg: &PsoConfig) -> Result<PsoOutcome, PsoError>
where
    F: Fn(&Position) -> f64 + Sync,
{
    let mut state = init_swarm(&loss_fn, bounds, cfg)?;
    let termination = loop {
        if state.loss_history.len() >= cfg.max_iterations {
            break Termination::MaxIterations;
        }
        if stalled(&state.loss_history, cfg) {
            break Termination::Stalled;
        }
        state = step_swarm(state, &loss_fn, bounds, cfg)?;
    };
    Ok(PsoOutcome {
        best_position: state.global_best_position,
        best_loss: state.global_best_loss,
        loss_history: state.loss_history,
        termination,
    })
}

//! Stochastic integration of the controlled process and its running cost.
//!
//! The state follows `dr = v(r) dt + dB` while a running cost accumulates
//! `dℓ = v(r)·dB + (½|v(r)|² + V(r)) dt`, with `v` always evaluated at the
//! pre-step position. A whole rollout can be recorded on one tape (training:
//! memory grows with batch × steps) or streamed through per-step throwaway
//! tapes (evaluation: constant memory). Both paths execute the identical op
//! graph per step, so values agree bit for bit.
//!
//! Noise comes from one counter-based RNG stream per batch element, keyed by
//! the element's global index. An element's increments therefore do not
//! depend on how the batch is sharded, and resuming from a saved stream
//! position continues the exact sequence.

use crate::diffcore::{fsum, Array, Tape, ValueId};
use crate::driftnet::{Bound, DriftModel};
use crate::potentials::{AnalyticDrift, System};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Proposed positions closer than this to a potential singularity trigger
/// the step guard (resample once, then clamp to this radius).
pub const GUARD_RADIUS: f64 = 1e-8;

/// Anything able to record a drift field on a tape: a bound network, a plain
/// model (bound freshly per call — the evaluation path), or an analytic
/// drift. A [`Bound`] must only be used with the tape it was bound to.
pub trait DriftSource {
    fn record(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId>;
}

impl DriftSource for Bound<'_> {
    fn record(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        self.forward(tape, pos)
    }
}

impl DriftSource for DriftModel {
    fn record(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        self.bind(tape, false).forward(tape, pos)
    }
}

impl DriftSource for AnalyticDrift {
    fn record(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        self.forward(tape, pos)
    }
}

/// Time stepper for the position equation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integrator {
    /// Euler–Maruyama (default; all reference results use this).
    Em,
    /// Stability-optimized second-order stochastic Runge–Kutta for additive
    /// noise. The running cost keeps Euler–Maruyama semantics for the noise
    /// term and combines the two drift stages with the integrator's weights.
    Sosra,
}

impl Integrator {
    pub fn name(&self) -> &'static str {
        match self {
            Integrator::Em => "em",
            Integrator::Sosra => "sosra",
        }
    }

    pub fn parse(s: &str) -> Result<Integrator> {
        match s {
            "em" => Ok(Integrator::Em),
            "sosra" => Ok(Integrator::Sosra),
            _ => Err(Error::Config(format!(
                "unknown integrator '{s}' (valid: em, sosra)"
            ))),
        }
    }
}

/// Per-element Gaussian noise streams.
///
/// Element `b` of the global batch owns stream `first_element + b` of a
/// counter-based generator, so two sources covering disjoint ranges of the
/// same seed produce exactly the increments a single full-batch source would.
pub struct NoiseSource {
    kind: NoiseKind,
    count: usize,
}

enum NoiseKind {
    Streams(Vec<ChaCha12Rng>),
    /// Every "normal" is a fixed constant — zero silences the noise entirely
    /// (deterministic flow), other values script exact increments in tests.
    Constant(f64),
}

impl NoiseSource {
    pub fn new(seed: u64, batch: usize) -> NoiseSource {
        NoiseSource::with_range(seed, 0, batch)
    }

    /// Streams for global elements `first_element .. first_element + count`.
    pub fn with_range(seed: u64, first_element: usize, count: usize) -> NoiseSource {
        let rngs = (0..count)
            .map(|b| {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                rng.set_stream((first_element + b) as u64);
                rng
            })
            .collect();
        NoiseSource {
            kind: NoiseKind::Streams(rngs),
            count,
        }
    }

    /// All increments zero: the deterministic drift flow.
    pub fn silent(batch: usize) -> NoiseSource {
        NoiseSource {
            kind: NoiseKind::Constant(0.0),
            count: batch,
        }
    }

    /// Every standard normal equals `c` (for hand-computed step tests).
    pub fn constant(batch: usize, c: f64) -> NoiseSource {
        NoiseSource {
            kind: NoiseKind::Constant(c),
            count: batch,
        }
    }

    pub fn batch(&self) -> usize {
        self.count
    }

    /// Fill `out` with standard normals from element `b`'s stream.
    pub fn normals(&mut self, b: usize, out: &mut [f64]) {
        match &mut self.kind {
            NoiseKind::Streams(rngs) => {
                let rng = &mut rngs[b];
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
            }
            NoiseKind::Constant(c) => out.fill(*c),
        }
    }

    /// Stream positions for checkpointing. Constant sources report zeros.
    pub fn word_pos(&self) -> Vec<u128> {
        match &self.kind {
            NoiseKind::Streams(rngs) => rngs.iter().map(|r| r.get_word_pos()).collect(),
            NoiseKind::Constant(_) => vec![0; self.count],
        }
    }

    /// Restore stream positions saved by [`NoiseSource::word_pos`].
    pub fn set_word_pos(&mut self, pos: &[u128]) -> Result<()> {
        if pos.len() != self.count {
            return Err(Error::Checkpoint(format!(
                "noise state has {} streams, source has {}",
                pos.len(),
                self.count
            )));
        }
        if let NoiseKind::Streams(rngs) = &mut self.kind {
            for (rng, &p) in rngs.iter_mut().zip(pos) {
                rng.set_word_pos(p);
            }
        }
        Ok(())
    }
}

/// Singular sets the integrator must keep proposals away from: fixed sites
/// (nuclei) and, for pair-singular interactions, particle coincidences.
#[derive(Clone, Debug, Default)]
pub struct GuardSpec {
    pub sites: Vec<Vec<f64>>,
    pub pairs: bool,
}

impl GuardSpec {
    pub fn for_system(system: &System) -> GuardSpec {
        GuardSpec {
            sites: system.nuclei().into_iter().map(|(site, _)| site).collect(),
            pairs: system.pair_singular(),
        }
    }

    fn is_active(&self) -> bool {
        !self.sites.is_empty() || self.pairs
    }

    fn is_clear_batch(&self, config: &[f64], n: usize, d: usize) -> bool {
        config.chunks(n * d).all(|c| self.is_clear(c, n, d))
    }

    /// Is the configuration clear of every guarded singularity?
    fn is_clear(&self, config: &[f64], n: usize, d: usize) -> bool {
        for i in 0..n {
            let ri = &config[i * d..(i + 1) * d];
            for site in &self.sites {
                let d2: f64 = ri
                    .iter()
                    .zip(site)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d2 < GUARD_RADIUS * GUARD_RADIUS {
                    return false;
                }
            }
            if self.pairs {
                for j in (i + 1)..n {
                    let rj = &config[j * d..(j + 1) * d];
                    let d2: f64 = ri
                        .iter()
                        .zip(rj)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if d2 < GUARD_RADIUS * GUARD_RADIUS {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Push every violating particle out to the guard radius: away from the
    /// offending site along the current offset (first axis if exactly on it),
    /// and violating pairs apart symmetrically about their midpoint.
    pub fn clamp(&self, config: &mut [f64], n: usize, d: usize) {
        for i in 0..n {
            for site in &self.sites {
                let start = i * d;
                let dist = (0..d)
                    .map(|c| (config[start + c] - site[c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist >= GUARD_RADIUS {
                    continue;
                }
                if dist == 0.0 {
                    for c in 0..d {
                        config[start + c] = site[c];
                    }
                    config[start] += GUARD_RADIUS;
                } else {
                    let scale = GUARD_RADIUS / dist;
                    for c in 0..d {
                        config[start + c] = site[c] + (config[start + c] - site[c]) * scale;
                    }
                }
            }
        }
        if !self.pairs {
            return;
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (si, sj) = (i * d, j * d);
                let dist = (0..d)
                    .map(|c| (config[si + c] - config[sj + c]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist >= GUARD_RADIUS {
                    continue;
                }
                for c in 0..d {
                    let mid = 0.5 * (config[si + c] + config[sj + c]);
                    let half = if dist == 0.0 {
                        if c == 0 {
                            0.5 * GUARD_RADIUS
                        } else {
                            0.0
                        }
                    } else {
                        0.5 * GUARD_RADIUS / dist * (config[si + c] - config[sj + c])
                    };
                    config[si + c] = mid + half;
                    config[sj + c] = mid - half;
                }
            }
        }
    }
}

/// One integration step recorded on a tape.
pub struct StepOutcome {
    /// Post-step positions `(B, N, d)`.
    pub new_pos: ValueId,
    /// Per-element cost increment `(B,)`: `v·ΔB + (½|v|² + V)Δt`.
    pub dcost: ValueId,
    /// The drift-only part `(½|v|² + V)Δt` of `dcost` (variance-reduced
    /// estimate: same expectation, no martingale noise).
    pub dcost_novar: ValueId,
    /// Elements whose proposal needed the singularity guard this step.
    pub guard_events: u64,
}

/// Run the singularity guard over already-drawn increments (scaled by √Δt):
/// for each element whose proposal `pos + ΔB + v_eff·Δt` lands inside the
/// guard radius, resample that element's increments once from its stream; if
/// the fresh proposal still violates, clamp it and back-solve the increment.
/// The adjusted ΔB is by construction the one producing the realized path,
/// so it is also what the `v·ΔB` cost term must use. Returns the number of
/// elements that needed intervention.
fn apply_guard(
    pos_vals: &Array,
    eff_drift: &[f64],
    guard: &GuardSpec,
    dt: f64,
    db: &mut [f64],
    noise: &mut NoiseSource,
) -> u64 {
    if !guard.is_active() {
        return 0;
    }
    let shape = pos_vals.shape();
    let (b_n, n, d) = (shape[0], shape[1], shape[2]);
    let stride = n * d;
    let sqrt_dt = dt.sqrt();
    let mut events = 0u64;
    let mut proposed = vec![0.0; stride];
    for b in 0..b_n {
        let base = b * stride;
        let propose = |db_el: &[f64], out: &mut [f64]| {
            for k in 0..stride {
                out[k] = pos_vals.data()[base + k] + db_el[k] + eff_drift[base + k] * dt;
            }
        };
        propose(&db[base..base + stride], &mut proposed);
        if guard.is_clear(&proposed, n, d) {
            continue;
        }
        events += 1;
        // One fresh draw, then a deterministic clamp if that also fails.
        noise.normals(b, &mut db[base..base + stride]);
        for v in &mut db[base..base + stride] {
            *v *= sqrt_dt;
        }
        propose(&db[base..base + stride], &mut proposed);
        if !guard.is_clear(&proposed, n, d) {
            guard.clamp(&mut proposed, n, d);
            for k in 0..stride {
                db[base + k] =
                    proposed[k] - pos_vals.data()[base + k] - eff_drift[base + k] * dt;
            }
        }
    }
    events
}

/// Euler–Maruyama: `r ← r + ΔB + v(r)Δt`, `ℓ ← ℓ + v(r)·ΔB + (½|v(r)|² +
/// V(r))Δt`, drift and potential at the pre-step position.
pub fn em_step(
    tape: &mut Tape,
    drift: &dyn DriftSource,
    system: &System,
    guard: &GuardSpec,
    pos: ValueId,
    dt: f64,
    noise: &mut NoiseSource,
) -> Result<StepOutcome> {
    check_step_inputs(tape, system, pos, dt)?;
    let shape = tape.value(pos).shape().to_vec();
    let (b_n, stride) = (shape[0], shape[1] * shape[2]);
    if noise.batch() != b_n {
        return Err(Error::Contract(format!(
            "noise source covers {} elements, batch has {b_n}",
            noise.batch()
        )));
    }
    let v = drift.record(tape, pos)?;

    let sqrt_dt = dt.sqrt();
    let mut db = vec![0.0; b_n * stride];
    for b in 0..b_n {
        noise.normals(b, &mut db[b * stride..(b + 1) * stride]);
    }
    for x in &mut db {
        *x *= sqrt_dt;
    }
    let guard_events = {
        let pos_vals = tape.value(pos).clone();
        let v_vals = tape.value(v).data().to_vec();
        apply_guard(&pos_vals, &v_vals, guard, dt, &mut db, noise)
    };
    let db = tape.leaf(Array::from_vec(&shape, db)?);

    let vdt = tape.scale(v, dt)?;
    let moved = tape.add(pos, db)?;
    let new_pos = tape.add(moved, vdt)?;

    let (dcost, dcost_novar) = step_cost(tape, system, pos, v, db, dt)?;
    Ok(StepOutcome {
        new_pos,
        dcost,
        dcost_novar,
        guard_events,
    })
}

/// Second-order stochastic Runge–Kutta step (additive noise, two drift
/// stages):
///
/// ```text
/// v₁ = v(r)                       I₁₀ = Δt^{3/2} (ξ₁/2 + ξ₂/(2√3))
/// H₂ = r + ¾Δt·v₁ + (3/2)·I₁₀/Δt   ΔB = √Δt·ξ₁
/// v̄  = v₂ + (v₁ − v₂)/3           v₂ = v(H₂)   (≡ ⅓v₁ + ⅔v₂)
/// r  ← r + ΔB + v̄·Δt
/// ℓ  ← ℓ + v₁·ΔB + (½|v₁|² + V(r))Δt
/// ```
///
/// The position update is weak order 2; the running cost keeps the pre-step
/// quadrature so its stationary expectation inherits the improved chain law
/// without picking up stage-point noise. The drift combination is written as
/// `v₂ + (v₁ − v₂)/3` so that when the stages coincide (zero drift, zero
/// noise) the step collapses bitwise to the Euler–Maruyama value.
pub fn sosra_step(
    tape: &mut Tape,
    drift: &dyn DriftSource,
    system: &System,
    guard: &GuardSpec,
    pos: ValueId,
    dt: f64,
    noise: &mut NoiseSource,
) -> Result<StepOutcome> {
    check_step_inputs(tape, system, pos, dt)?;
    let shape = tape.value(pos).shape().to_vec();
    let (b_n, stride) = (shape[0], shape[1] * shape[2]);
    if noise.batch() != b_n {
        return Err(Error::Contract(format!(
            "noise source covers {} elements, batch has {b_n}",
            noise.batch()
        )));
    }

    let v1 = drift.record(tape, pos)?;

    // Two normals per component: ξ₁ drives ΔB, ξ₂ the time integral I₁₀.
    let sqrt_dt = dt.sqrt();
    let i10_w1 = 0.5 * dt * sqrt_dt;
    let i10_w2 = 0.5 * dt * sqrt_dt / 3.0_f64.sqrt();
    let mut db_raw = vec![0.0; b_n * stride];
    let mut i10 = vec![0.0; b_n * stride];
    let mut xi = vec![0.0; 2 * stride];
    for b in 0..b_n {
        noise.normals(b, &mut xi);
        for k in 0..stride {
            db_raw[b * stride + k] = sqrt_dt * xi[k];
            i10[b * stride + k] = i10_w1 * xi[k] + i10_w2 * xi[stride + k];
        }
    }

    // Second stage position H₂ = pos + ¾Δt·v₁ + (3/2)I₁₀/Δt, assembled on
    // the tape: the backward pass must see the stage's dependence on the
    // current position and on v₁, or the path sensitivity of every later
    // step is silently dropped and the optimizer descends the wrong surface.
    let jitter: Vec<f64> = i10.iter().map(|x| 1.5 * x / dt).collect();
    let jitter = tape.leaf(Array::from_vec(&shape, jitter)?);
    let v1_dt = tape.scale(v1, 0.75 * dt)?;
    let drifted = tape.add(pos, v1_dt)?;
    let mut h2 = tape.add(drifted, jitter)?;
    // The stage point is an auxiliary evaluation, not part of the realized
    // path; it gets no singularity guard, but a clamp keeps the rare direct
    // hit finite. The clamp offset enters as a constant shift so the stage
    // stays differentiable through `pos` and `v₁`.
    {
        let needs_clamp = {
            let vals = tape.value(h2).data();
            guard.is_active() && !guard.is_clear_batch(vals, shape[1], shape[2])
        };
        if needs_clamp {
            let correction: Vec<f64> = {
                let raw = tape.value(h2).data();
                let mut clamped = raw.to_vec();
                for chunk in clamped.chunks_mut(stride) {
                    guard.clamp(chunk, shape[1], shape[2]);
                }
                clamped.iter().zip(raw).map(|(c, r)| c - r).collect()
            };
            let correction = tape.leaf(Array::from_vec(&shape, correction)?);
            h2 = tape.add(h2, correction)?;
        }
    }
    let v2 = drift.record(tape, h2)?;

    // v̄ = v₂ + (v₁ − v₂)/3, bitwise v when both stages agree.
    let dv = tape.sub(v1, v2)?;
    let dv3 = tape.scale(dv, 1.0 / 3.0)?;
    let v_eff = tape.add(v2, dv3)?;

    let guard_events = {
        let pos_vals = tape.value(pos).clone();
        let v_eff_vals = tape.value(v_eff).data().to_vec();
        apply_guard(&pos_vals, &v_eff_vals, guard, dt, &mut db_raw, noise)
    };
    let db = tape.leaf(Array::from_vec(&shape, db_raw)?);

    let vdt = tape.scale(v_eff, dt)?;
    let moved = tape.add(pos, db)?;
    let new_pos = tape.add(moved, vdt)?;

    // Cost: plain pre-step quadrature, identical to the Euler–Maruyama rule.
    // The integrand is sampled at realized path points only; evaluating any
    // of it at the noise-jittered stage point H₂ would reintroduce an O(Δt)
    // bias (the stage jitter has variance ∝ Δt), defeating the purpose of
    // the second-order position update. For a stationary chain the sampled
    // expectation depends only on the chain's law, which this update gets
    // right to O(Δt²).
    let (dcost, dcost_novar) = step_cost(tape, system, pos, v1, db, dt)?;
    Ok(StepOutcome {
        new_pos,
        dcost,
        dcost_novar,
        guard_events,
    })
}

fn check_step_inputs(tape: &Tape, system: &System, pos: ValueId, dt: f64) -> Result<()> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Config(format!("step size must be positive, got {dt}")));
    }
    let shape = tape.value(pos).shape();
    if shape.len() != 3 || shape[1] != system.n_particles() || shape[2] != system.dim() {
        return Err(Error::Dimension(format!(
            "{} expects positions (B, {}, {}), got {:?}",
            system.name(),
            system.n_particles(),
            system.dim(),
            shape
        )));
    }
    Ok(())
}

/// Cost increments for one step: `dcost = v·ΔB + (½|v|² + V)Δt`, `(B,)` each.
fn step_cost(
    tape: &mut Tape,
    system: &System,
    pos: ValueId,
    v: ValueId,
    db: ValueId,
    dt: f64,
) -> Result<(ValueId, ValueId)> {
    let prod = tape.mul(v, db)?;
    let m1 = tape.sum_axis(prod, 2)?; // (B, N)
    let mart = tape.sum_axis(m1, 1)?; // (B,)

    let sq = tape.square(v)?;
    let s1 = tape.sum_axis(sq, 2)?;
    let v2sum = tape.sum_axis(s1, 1)?; // (B,)
    let half_speed = tape.scale(v2sum, 0.5)?;

    let pot = system.potential(tape, pos)?; // (B,)
    let inner = tape.add(half_speed, pot)?;
    let dcost_novar = tape.scale(inner, dt)?;
    let dcost = tape.add(mart, dcost_novar)?;
    Ok((dcost, dcost_novar))
}

/// A training rollout recorded on one tape.
pub struct TapeRollout {
    /// Final positions node `(B, N, d)`.
    pub final_pos: ValueId,
    /// Per-element total cost `ℓ` over the rollout, `(B,)`.
    pub cost_per_element: ValueId,
    /// Drift-only counterpart of `cost_per_element`, `(B,)`.
    pub novar_per_element: ValueId,
    pub guard_events: u64,
}

/// Record `n_steps` integration steps on `tape`, chaining positions, and
/// accumulate the per-element costs with correctly rounded sums.
pub fn rollout_on_tape(
    tape: &mut Tape,
    drift: &dyn DriftSource,
    system: &System,
    initial: &Array,
    dt: f64,
    n_steps: usize,
    integrator: Integrator,
    noise: &mut NoiseSource,
) -> Result<TapeRollout> {
    if n_steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let guard = GuardSpec::for_system(system);
    let mut pos = tape.leaf(initial.clone());
    let mut dcosts = Vec::with_capacity(n_steps);
    let mut dnovars = Vec::with_capacity(n_steps);
    let mut guard_events = 0;
    for step in 0..n_steps {
        let out = match integrator {
            Integrator::Em => em_step(tape, drift, system, &guard, pos, dt, noise),
            Integrator::Sosra => sosra_step(tape, drift, system, &guard, pos, dt, noise),
        }
        .map_err(|e| e.with_context(format!("rollout step {}/{}", step + 1, n_steps)))?;
        pos = out.new_pos;
        dcosts.push(out.dcost);
        dnovars.push(out.dcost_novar);
        guard_events += out.guard_events;
    }
    let cost_per_element = tape.add_many(&dcosts)?;
    let novar_per_element = tape.add_many(&dnovars)?;
    Ok(TapeRollout {
        final_pos: pos,
        cost_per_element,
        novar_per_element,
        guard_events,
    })
}

/// Result of a streaming (evaluation-mode) rollout.
pub struct RolloutRecord {
    pub final_positions: Array,
    /// Per-element total cost `ℓ` (correctly rounded sum over steps).
    pub cost_per_element: Vec<f64>,
    pub novar_per_element: Vec<f64>,
    pub guard_events: u64,
    /// Per-step per-element cost increments, `n_steps × B` (only when
    /// recording).
    pub step_costs: Option<Vec<Vec<f64>>>,
    /// Post-step positions per step (only when recording; memory grows with
    /// `n_steps`, so record only at diagnostic scales).
    pub positions: Option<Vec<Array>>,
}

impl RolloutRecord {
    /// Mean of `ℓ / (n_steps·Δt)` over the batch: the energy estimate.
    pub fn energy(&self, dt: f64, n_steps: usize) -> f64 {
        let t_total = dt * n_steps as f64;
        fsum(self.cost_per_element.iter().copied()) / (self.cost_per_element.len() as f64 * t_total)
    }

    /// Batch standard error of the per-element `ℓ/T` values.
    pub fn energy_stderr(&self, dt: f64, n_steps: usize) -> f64 {
        let t_total = dt * n_steps as f64;
        let b = self.cost_per_element.len();
        if b < 2 {
            return f64::INFINITY;
        }
        let mean = self.energy(dt, n_steps);
        let var = fsum(
            self.cost_per_element
                .iter()
                .map(|&l| (l / t_total - mean) * (l / t_total - mean)),
        ) / ((b - 1) as f64);
        (var / b as f64).sqrt()
    }

    /// Variance-reduced energy estimate (drift-only integrand).
    pub fn energy_novar(&self, dt: f64, n_steps: usize) -> f64 {
        let t_total = dt * n_steps as f64;
        fsum(self.novar_per_element.iter().copied())
            / (self.novar_per_element.len() as f64 * t_total)
    }
}

/// Stream a rollout through per-step throwaway tapes: constant memory in the
/// step count (unless `record` retains traces). Values match
/// [`rollout_on_tape`] bit for bit because every step executes the identical
/// op graph.
pub fn rollout_eval(
    drift: &dyn DriftSource,
    system: &System,
    initial: &Array,
    dt: f64,
    n_steps: usize,
    integrator: Integrator,
    noise: &mut NoiseSource,
    record: bool,
) -> Result<RolloutRecord> {
    if n_steps == 0 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    let guard = GuardSpec::for_system(system);
    let b_n = initial.shape()[0];
    let mut positions = initial.clone();
    let mut step_costs: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut step_novars: Vec<Vec<f64>> = Vec::with_capacity(n_steps);
    let mut trace: Vec<Array> = Vec::new();
    let mut guard_events = 0;
    for step in 0..n_steps {
        let mut tape = Tape::new();
        let pos = tape.leaf(positions);
        let out = match integrator {
            Integrator::Em => em_step(&mut tape, drift, system, &guard, pos, dt, noise),
            Integrator::Sosra => sosra_step(&mut tape, drift, system, &guard, pos, dt, noise),
        }
        .map_err(|e| e.with_context(format!("rollout step {}/{}", step + 1, n_steps)))?;
        guard_events += out.guard_events;
        step_costs.push(tape.value(out.dcost).data().to_vec());
        step_novars.push(tape.value(out.dcost_novar).data().to_vec());
        positions = tape.value(out.new_pos).clone();
        if record {
            trace.push(positions.clone());
        }
    }
    // ℓ per element: correctly rounded sum over steps — identical to the
    // on-tape accumulation of the same per-step values.
    let cost_per_element: Vec<f64> = (0..b_n)
        .map(|b| fsum(step_costs.iter().map(|s| s[b])))
        .collect();
    let novar_per_element: Vec<f64> = (0..b_n)
        .map(|b| fsum(step_novars.iter().map(|s| s[b])))
        .collect();
    Ok(RolloutRecord {
        final_positions: positions,
        cost_per_element,
        novar_per_element,
        guard_events,
        step_costs: record.then_some(step_costs),
        positions: record.then_some(trace),
    })
}

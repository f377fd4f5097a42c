//! Physics-grade checks and exports on top of a drift field: the potential
//! the drift would solve exactly, per-sample zero-variance residuals,
//! density histograms with total-variation comparison against analytic
//! laws, drift-field grids for plotting, and trajectory tables.
//!
//! The central identity: a drift `v` generates the effective potential
//!
//! ```text
//! V_U(x) = ½(∇·v(x) + |v(x)|²)
//! ```
//!
//! and `v` is the exact ground-state drift of a system with potential `V`
//! precisely when `V(x) − V_U(x)` is constant — the constant being the
//! ground-state energy `E₀`. The spread of that residual over samples
//! therefore measures how far a learned drift is from exact, with zero
//! spread meaning a zero-variance energy estimator.

use crate::diffcore::{fsum, Array, Tape};
use crate::potentials::System;
use crate::sde::{DriftSource, RolloutRecord};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

/// How the divergence ∇·v is computed.
#[derive(Clone, Copy, Debug)]
pub enum DivergenceMode {
    /// Reverse-mode sweeps, one per coordinate (N·d passes, exact).
    Ad,
    /// Central finite differences with the given step (2·N·d drift
    /// evaluations; cross-validates the reverse-mode path).
    Fd { step: f64 },
    /// Stochastic trace estimation with Rademacher probes: cheaper than N·d
    /// sweeps for large systems, exact only in expectation.
    Hutchinson { probes: usize, seed: u64 },
}

impl DivergenceMode {
    /// Finite differences with a step balancing truncation against rounding.
    pub fn default_fd() -> DivergenceMode {
        DivergenceMode::Fd { step: 1e-5 }
    }
}

/// The effective potential `V_U = ½(∇·v + |v|²)` per sample.
///
/// `positions` is a batch `(B, N, d)`; the result has one value per batch
/// element. A sample where the drift or its divergence comes out non-finite
/// (a singular configuration) is an error naming the sample.
pub fn v_u_potential(
    drift: &dyn DriftSource,
    positions: &Array,
    mode: DivergenceMode,
) -> Result<Vec<f64>> {
    let shape = positions.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "positions must be (B, N, d), got {shape:?}"
        )));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let stride = n * d;

    // Diagonal derivatives ∂v_{m,j}/∂x_{m,j}, gathered per sample.
    let mut diag: Vec<Vec<f64>> = vec![Vec::with_capacity(stride); b];
    // Drift values for the |v|² half.
    let speed: Vec<Vec<f64>>;

    match mode {
        DivergenceMode::Ad => {
            let mut tape = Tape::new();
            let pos = tape.leaf(positions.clone());
            let v = drift.record(&mut tape, pos)?;
            let vv = tape.value(v).clone();
            if vv.shape() != shape {
                return Err(Error::Contract(format!(
                    "drift returned {:?} for positions {shape:?}",
                    vv.shape()
                )));
            }
            for k in 0..stride {
                let mut seed = vec![0.0; b * stride];
                for bi in 0..b {
                    seed[bi * stride + k] = 1.0;
                }
                let seed = Array::from_vec(shape, seed)?;
                let grads = tape.backward_seeded(v, &seed)?;
                match grads.wrt(pos) {
                    Some(g) => {
                        for bi in 0..b {
                            diag[bi].push(g.data()[bi * stride + k]);
                        }
                    }
                    None => {
                        for row in diag.iter_mut() {
                            row.push(0.0);
                        }
                    }
                }
            }
            speed = (0..b)
                .map(|bi| {
                    vv.data()[bi * stride..(bi + 1) * stride]
                        .iter()
                        .map(|x| x * x)
                        .collect()
                })
                .collect();
        }
        DivergenceMode::Fd { step } => {
            if !(step > 0.0 && step.is_finite()) {
                return Err(Error::Config(format!(
                    "finite-difference step must be positive, got {step}"
                )));
            }
            let eval = |data: Vec<f64>| -> Result<Array> {
                let mut tape = Tape::new();
                let pos = tape.leaf(Array::from_vec(shape, data)?);
                let v = drift.record(&mut tape, pos)?;
                Ok(tape.value(v).clone())
            };
            for k in 0..stride {
                let mut plus = positions.data().to_vec();
                let mut minus = positions.data().to_vec();
                for bi in 0..b {
                    plus[bi * stride + k] += step;
                    minus[bi * stride + k] -= step;
                }
                let (vp, vm) = (eval(plus)?, eval(minus)?);
                for bi in 0..b {
                    let idx = bi * stride + k;
                    diag[bi].push((vp.data()[idx] - vm.data()[idx]) / (2.0 * step));
                }
            }
            let v0 = eval(positions.data().to_vec())?;
            speed = (0..b)
                .map(|bi| {
                    v0.data()[bi * stride..(bi + 1) * stride]
                        .iter()
                        .map(|x| x * x)
                        .collect()
                })
                .collect();
        }
        DivergenceMode::Hutchinson { probes, seed } => {
            if probes == 0 {
                return Err(Error::Config("Hutchinson needs at least one probe".into()));
            }
            let mut tape = Tape::new();
            let pos = tape.leaf(positions.clone());
            let v = drift.record(&mut tape, pos)?;
            let vv = tape.value(v).clone();
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut estimates = vec![Vec::with_capacity(probes); b];
            for _ in 0..probes {
                let z: Vec<f64> = (0..b * stride)
                    .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                    .collect();
                let seed_arr = Array::from_vec(shape, z.clone())?;
                let grads = tape.backward_seeded(v, &seed_arr)?;
                if let Some(g) = grads.wrt(pos) {
                    for bi in 0..b {
                        let dot = fsum(
                            (0..stride)
                                .map(|k| z[bi * stride + k] * g.data()[bi * stride + k]),
                        );
                        estimates[bi].push(dot);
                    }
                } else {
                    for row in estimates.iter_mut() {
                        row.push(0.0);
                    }
                }
            }
            for (bi, row) in estimates.into_iter().enumerate() {
                let mean = fsum(row.iter().copied()) / probes as f64;
                diag[bi].push(mean);
            }
            speed = (0..b)
                .map(|bi| {
                    vv.data()[bi * stride..(bi + 1) * stride]
                        .iter()
                        .map(|x| x * x)
                        .collect()
                })
                .collect();
        }
    }

    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let value = 0.5
            * fsum(
                diag[bi]
                    .iter()
                    .copied()
                    .chain(speed[bi].iter().copied()),
            );
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "effective potential at sample {bi} is {value} (singular configuration?)"
            )));
        }
        out.push(value);
    }
    Ok(out)
}

/// Per-sample residuals `V(x) − V_U(x)`.
///
/// For the exact ground-state drift these are the same constant at every
/// sample — the ground-state energy — so their spread measures drift
/// quality. Samples where the potential itself is non-finite are errors
/// naming the sample.
pub fn zero_variance_residual(
    system: &System,
    drift: &dyn DriftSource,
    positions: &Array,
    mode: DivergenceMode,
) -> Result<Vec<f64>> {
    let shape = positions.shape();
    if shape.len() != 3 || shape[1] != system.n_particles() || shape[2] != system.dim() {
        return Err(Error::Dimension(format!(
            "{} expects positions (B, {}, {}), got {shape:?}",
            system.name(),
            system.n_particles(),
            system.dim()
        )));
    }
    let v_u = v_u_potential(drift, positions, mode)?;
    let stride = shape[1] * shape[2];
    let mut out = Vec::with_capacity(shape[0]);
    for (bi, vu) in v_u.iter().enumerate() {
        let config = &positions.data()[bi * stride..(bi + 1) * stride];
        let v = system
            .potential_at(config)
            .map_err(|e| e.with_context(format!("sample {bi}")))?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!(
                "potential at sample {bi} is {v} (singular configuration)"
            )));
        }
        out.push(v - vu);
    }
    Ok(out)
}

/// Which scalar each particle contributes to a histogram.
#[derive(Clone, Copy, Debug)]
pub enum Projection {
    /// One coordinate axis of every particle.
    Coordinate(usize),
    /// Euclidean distance of every particle from the origin.
    Radius,
}

/// A one-dimensional binned density over `[min, max)` with explicit
/// out-of-range tallies, so counts always account for every sample.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub bins: usize,
    pub counts: Vec<u64>,
    /// Samples strictly below `min` / at or above `max`.
    pub below: u64,
    pub above: u64,
    /// Total samples offered, `counts.sum() + below + above`.
    pub total: u64,
}

impl Histogram {
    pub fn bin_width(&self) -> f64 {
        (self.max - self.min) / self.bins as f64
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.bins).map(|i| self.min + (i as f64 + 0.5) * w).collect()
    }

    /// Normalized density per bin: counts / (total · width). Integrating
    /// over the covered range gives the in-range sample fraction.
    pub fn density(&self) -> Vec<f64> {
        let norm = 1.0 / (self.total as f64 * self.bin_width());
        self.counts.iter().map(|&c| c as f64 * norm).collect()
    }
}

/// Bin the projected values of a position batch `(B, N, d)`; every particle
/// of every element contributes one value.
pub fn histogram(
    samples: &Array,
    projection: Projection,
    min: f64,
    max: f64,
    bins: usize,
) -> Result<Histogram> {
    let shape = samples.shape();
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "samples must be (B, N, d), got {shape:?}"
        )));
    }
    if !(max > min) || bins == 0 {
        return Err(Error::Config(format!(
            "need max > min and bins >= 1, got [{min}, {max}) with {bins} bins"
        )));
    }
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if let Projection::Coordinate(axis) = projection {
        if axis >= d {
            return Err(Error::Config(format!(
                "coordinate axis {axis} out of range for dimension {d}"
            )));
        }
    }
    let mut hist = Histogram {
        min,
        max,
        bins,
        counts: vec![0; bins],
        below: 0,
        above: 0,
        total: 0,
    };
    let width = hist.bin_width();
    for bi in 0..b {
        for p in 0..n {
            let base = (bi * n + p) * d;
            let value = match projection {
                Projection::Coordinate(axis) => samples.data()[base + axis],
                Projection::Radius => samples.data()[base..base + d]
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt(),
            };
            hist.total += 1;
            if value < min {
                hist.below += 1;
            } else if value >= max {
                hist.above += 1;
            } else {
                let idx = (((value - min) / width) as usize).min(bins - 1);
                hist.counts[idx] += 1;
            }
        }
    }
    Ok(hist)
}

/// Composite Simpson integral of `f` over `[a, b]` with `2·half` panels.
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, half: usize) -> f64 {
    let n = 2 * half;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Total-variation distance between a histogram and an analytic density.
///
/// The analytic law is binned by quadrature (`pdf` must integrate to 1 over
/// its full support); everything outside the histogram's range is compared
/// as a single overflow cell, so mass the histogram misses still counts.
pub fn tv_distance(hist: &Histogram, pdf: &dyn Fn(f64) -> f64) -> f64 {
    let width = hist.bin_width();
    let mut q_in = Vec::with_capacity(hist.bins);
    for i in 0..hist.bins {
        let a = hist.min + i as f64 * width;
        q_in.push(simpson(pdf, a, a + width, 8).max(0.0));
    }
    let q_covered = fsum(q_in.iter().copied());
    let q_out = (1.0 - q_covered).max(0.0);
    let total = hist.total as f64;
    let p_out = (hist.below + hist.above) as f64 / total;
    let mut acc: Vec<f64> = hist
        .counts
        .iter()
        .zip(&q_in)
        .map(|(&c, &q)| (c as f64 / total - q).abs())
        .collect();
    acc.push((p_out - q_out).abs());
    0.5 * fsum(acc.into_iter())
}

/// Where and how to slice a drift field for plotting.
#[derive(Clone, Debug)]
pub struct PlaneSpec {
    /// The two coordinate axes of the probe particle that sweep the grid.
    pub axes: (usize, usize),
    /// Grid covers `[-extent, extent]²` in the plane axes.
    pub extent: f64,
    /// Which particle moves over the grid.
    pub probe: usize,
    /// Full flattened configuration (N·d); the probe's plane coordinates are
    /// overwritten per grid point, everything else (other particles, the
    /// probe's off-plane coordinates) stays fixed.
    pub base: Vec<f64>,
}

/// One evaluated grid point: plane coordinates, the probe particle's drift
/// vector, and its magnitude.
#[derive(Clone, Debug)]
pub struct GridPoint {
    pub plane: [f64; 2],
    pub drift: Vec<f64>,
    pub magnitude: f64,
}

/// Evaluate the drift of one particle over a square grid (`resolution²`
/// rows, row-major over the first plane axis) with the other coordinates
/// held at `spec.base`. The whole grid is one batched drift evaluation.
pub fn drift_grid(
    drift: &dyn DriftSource,
    n: usize,
    d: usize,
    spec: &PlaneSpec,
    resolution: usize,
) -> Result<Vec<GridPoint>> {
    if resolution < 2 {
        return Err(Error::Config("grid needs resolution >= 2".into()));
    }
    if spec.base.len() != n * d {
        return Err(Error::Dimension(format!(
            "base configuration has {} coordinates, system needs {}",
            spec.base.len(),
            n * d
        )));
    }
    if spec.probe >= n || spec.axes.0 >= d || spec.axes.1 >= d || spec.axes.0 == spec.axes.1 {
        return Err(Error::Config(format!(
            "probe {} axes {:?} invalid for {} particles in dimension {}",
            spec.probe, spec.axes, n, d
        )));
    }
    if !(spec.extent > 0.0) {
        return Err(Error::Config(format!(
            "grid extent must be positive, got {}",
            spec.extent
        )));
    }
    let ticks: Vec<f64> = (0..resolution)
        .map(|i| -spec.extent + 2.0 * spec.extent * i as f64 / (resolution - 1) as f64)
        .collect();
    let rows = resolution * resolution;
    let mut data = Vec::with_capacity(rows * n * d);
    for &u in &ticks {
        for &v in &ticks {
            let mut config = spec.base.clone();
            config[spec.probe * d + spec.axes.0] = u;
            config[spec.probe * d + spec.axes.1] = v;
            data.extend_from_slice(&config);
        }
    }
    let mut tape = Tape::new();
    let pos = tape.leaf(Array::from_vec(&[rows, n, d], data)?);
    let out = drift.record(&mut tape, pos)?;
    let values = tape.value(out);
    let mut points = Vec::with_capacity(rows);
    for (i, &u) in ticks.iter().enumerate() {
        for (j, &v) in ticks.iter().enumerate() {
            let base = ((i * resolution + j) * n + spec.probe) * d;
            let vec: Vec<f64> = values.data()[base..base + d].to_vec();
            let magnitude = fsum(vec.iter().map(|x| x * x)).sqrt();
            points.push(GridPoint {
                plane: [u, v],
                drift: vec,
                magnitude,
            });
        }
    }
    Ok(points)
}

/// One row of a trajectory table: a particle's coordinates after a step.
#[derive(Clone, Debug)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub time: f64,
    pub particle: usize,
    pub coords: Vec<f64>,
}

/// Flatten one batch element's recorded trajectory into rows, one per
/// (step, particle) for the chosen particles — `steps × |particles|` rows.
pub fn trajectory_table(
    record: &RolloutRecord,
    dt: f64,
    element: usize,
    particles: &[usize],
) -> Result<Vec<TrajectoryPoint>> {
    let Some(trace) = record.positions.as_ref() else {
        return Err(Error::Contract(
            "rollout was not recorded with positions retained".into(),
        ));
    };
    let shape = trace
        .first()
        .ok_or_else(|| Error::Contract("recorded trajectory is empty".into()))?
        .shape()
        .to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if element >= b {
        return Err(Error::Dimension(format!(
            "element {element} out of range for batch {b}"
        )));
    }
    if let Some(&bad) = particles.iter().find(|&&p| p >= n) {
        return Err(Error::Dimension(format!(
            "particle {bad} out of range for {n} particles"
        )));
    }
    let mut rows = Vec::with_capacity(trace.len() * particles.len());
    for (step, frame) in trace.iter().enumerate() {
        for &p in particles {
            let base = (element * n + p) * d;
            rows.push(TrajectoryPoint {
                step,
                time: (step + 1) as f64 * dt,
                particle: p,
                coords: frame.data()[base..base + d].to_vec(),
            });
        }
    }
    Ok(rows)
}

/// Count discrete-time particle crossings in a recorded one-dimensional
/// trajectory: pairs whose coordinate order flips between consecutive
/// steps. The exact ordered process never crosses, so each count is a
/// discretization artifact; the rate per particle-step should be small.
pub fn ordering_violations(record: &RolloutRecord, element: usize) -> Result<u64> {
    let Some(trace) = record.positions.as_ref() else {
        return Err(Error::Contract(
            "rollout was not recorded with positions retained".into(),
        ));
    };
    let shape = trace
        .first()
        .ok_or_else(|| Error::Contract("recorded trajectory is empty".into()))?
        .shape()
        .to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if d != 1 {
        return Err(Error::Contract(format!(
            "ordering is defined for 1-D systems, got dimension {d}"
        )));
    }
    if element >= b {
        return Err(Error::Dimension(format!(
            "element {element} out of range for batch {b}"
        )));
    }
    let coords = |frame: &Array| -> Vec<f64> {
        (0..n).map(|p| frame.data()[(element * n + p) * d]).collect()
    };
    let mut crossings = 0u64;
    let mut prev = coords(&trace[0]);
    for frame in &trace[1..] {
        let cur = coords(frame);
        for i in 0..n {
            for j in i + 1..n {
                let before = prev[i] - prev[j];
                let after = cur[i] - cur[j];
                if before != 0.0 && after != 0.0 && before.signum() != after.signum() {
                    crossings += 1;
                }
            }
        }
        prev = cur;
    }
    Ok(crossings)
}

/// Write rows of floats as delimited text with a self-describing header.
pub fn write_table(
    path: &std::path::Path,
    header: &[&str],
    rows: impl Iterator<Item = Vec<f64>>,
) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(Error::io(format!("writing table {}", path.display())))
}

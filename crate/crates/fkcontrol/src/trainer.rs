//! The learning loop: Monte Carlo cost estimation, the endpoint gradient
//! correction, Adam with a stepped exponential learning-rate schedule, and
//! rollout chaining across epochs.
//!
//! Each epoch rolls the batch forward under the current drift, recording the
//! whole trajectory on tape, and minimizes
//!
//! ```text
//! loss = (1/(B·T)) Σ_{b,t} [ v(r_t)·ΔB_t + (½|v(r_t)|² + V(r_t))Δt ]
//! ```
//!
//! whose value (the time-averaged running cost) is itself the energy
//! estimate: it upper-bounds the ground-state energy and reaches it exactly
//! when the controlled process matches the ground-state dynamics. Gradients
//! flow through both the drift evaluations and the positions they produced
//! (backpropagation through the whole trajectory); epoch boundaries sever the
//! position graph, so chaining acts as truncated backpropagation through
//! time with the state carried over.
//!
//! The batch may be split into shards to bound tape memory: each shard
//! records its own tape, losses are normalized by the full batch size, and
//! shard gradients merge by addition in a fixed order, so sharding changes
//! memory use, not the objective.

use crate::diffcore::{fsum, Array, Gradients, Tape};
use crate::driftnet::DriftModel;
use crate::potentials::System;
use crate::sde::{rollout_on_tape, DriftSource, GuardSpec, Integrator, NoiseSource};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::Distribution;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// RNG stream for epoch-0 initial positions (element noise streams use the
/// element index; parameter init uses its own far-away stream).
const INIT_POSITIONS_STREAM: u64 = 0xFFFF_FFFF_0000_0001;

/// Pinned metrics header; the acceptance checks compare re-runs column by
/// column (all but `seconds` must reproduce exactly).
pub const METRICS_HEADER: &str = "epoch,energy,energy_novar,loss,lr,grad_norm,guard_events,seconds";

/// Hyperparameters of a training run.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dt: f64,
    pub steps_per_epoch: usize,
    pub n_epochs: usize,
    pub lr_init: f64,
    /// Multiply the learning rate by this factor every `lr_decay_every`
    /// epochs (default 0.95 every 10).
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Apply the endpoint gradient correction (subtract the gradient of
    /// `r_T·v(r_T)` per unit time, with the drift factor severed).
    pub boundary_correction: bool,
    /// Sever the direct parameter dependence of the `v(r_T)` factor in the
    /// correction (the default); `false` lets gradient flow through it too.
    pub sever_boundary_drift: bool,
    /// Backpropagate the drift-only part of the cost, `Σ (½|v|² + V)Δt`,
    /// dropping the martingale increments `v·ΔB` from the gradient (the
    /// default). Each increment multiplies noise that is independent of
    /// everything already on the tape, so its expected gradient is exactly
    /// zero in both the direct (`∂v/∂θ·ΔB`) and the path
    /// (`∇v·∂x/∂θ·ΔB`) channels; dropping it changes no stationary point
    /// but removes the dominant gradient-noise term at small batch.
    /// Reported loss and energy always include the martingale term.
    pub martingale_free_grad: bool,
    pub integrator: Integrator,
    /// Number of batch shards per epoch (tape memory scales with
    /// `batch_size/shards · steps_per_epoch`).
    pub shards: usize,
    /// Write `model.ckpt` / `state.ckpt` into the checkpoint directory every
    /// this many epochs (0 disables periodic checkpoints; a final one is
    /// always written when a directory is given).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 1024,
            dt: 0.01,
            steps_per_epoch: 1024,
            n_epochs: 100,
            lr_init: 1e-2,
            lr_decay_factor: 0.95,
            lr_decay_every: 10,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 7,
            boundary_correction: true,
            sever_boundary_drift: true,
            integrator: Integrator::Em,
            shards: 1,
            checkpoint_every: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be >= 1".into()));
        }
        if !(self.lr_init > 0.0) {
            return Err(Error::Config(format!(
                "lr_init must be positive, got {}",
                self.lr_init
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Config("lr_decay_every must be >= 1".into()));
        }
        if self.shards == 0 || self.shards > self.batch_size {
            return Err(Error::Config(format!(
                "shards must be in 1..=batch_size, got {} for batch {}",
                self.shards, self.batch_size
            )));
        }
        Ok(())
    }

    /// Stepped exponential schedule: `lr_init · factor^⌊epoch/every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_init
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Adam accumulators, one pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct OptState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
    /// Updates skipped because a gradient was non-finite.
    pub skipped_nonfinite: u64,
}

impl OptState {
    pub fn new(model: &DriftModel) -> OptState {
        OptState {
            m: model
                .params
                .iter()
                .map(|p| Array::zeros(p.value.shape()))
                .collect(),
            v: model
                .params
                .iter()
                .map(|p| Array::zeros(p.value.shape()))
                .collect(),
            step: 0,
            skipped_nonfinite: 0,
        }
    }
}

/// One bias-corrected Adam update in place. A non-finite gradient anywhere
/// skips the whole update (and counts it) instead of poisoning the moments.
pub fn adam_step(
    opt: &mut OptState,
    model: &mut DriftModel,
    grads: &[Array],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != model.params.len() {
        return Err(Error::Contract(format!(
            "got {} gradients for {} parameters",
            grads.len(),
            model.params.len()
        )));
    }
    if grads
        .iter()
        .any(|g| g.data().iter().any(|v| !v.is_finite()))
    {
        opt.skipped_nonfinite += 1;
        return Ok(());
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, grad) in grads.iter().enumerate() {
        if grad.shape() != model.params[i].value.shape() {
            return Err(Error::Contract(format!(
                "gradient {} shaped {:?}, parameter {} shaped {:?}",
                i,
                grad.shape(),
                model.params[i].name,
                model.params[i].value.shape()
            )));
        }
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        let p = model.params[i].value.data_mut();
        for k in 0..p.len() {
            let g = grad.data()[k];
            m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
            v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

/// Per-epoch training metrics, in metrics-file column order.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    /// The loss value itself: the Monte Carlo energy estimate.
    pub energy: f64,
    /// Variance-reduced estimate (drift-only integrand, martingale dropped).
    pub energy_novar: f64,
    /// Objective value (equals `energy`; the endpoint correction shifts
    /// gradients only and never the reported number).
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub guard_events: u64,
    pub seconds: f64,
}

/// Receives one row per epoch as training progresses.
pub trait MetricsSink {
    fn record(&mut self, stats: &EpochStats) -> Result<()>;
}

/// Collects rows in memory (tests, summaries).
#[derive(Default)]
pub struct VecSink(pub Vec<EpochStats>);

impl MetricsSink for VecSink {
    fn record(&mut self, stats: &EpochStats) -> Result<()> {
        self.0.push(stats.clone());
        Ok(())
    }
}

/// Streams rows as delimited text with the pinned header, flushing each row
/// so an aborted run keeps everything written so far.
pub struct CsvSink<W: Write> {
    out: W,
}

impl<W: Write> CsvSink<W> {
    pub fn new(mut out: W) -> Result<CsvSink<W>> {
        writeln!(out, "{METRICS_HEADER}").map_err(Error::io("writing metrics header"))?;
        Ok(CsvSink { out })
    }

    /// Append to an existing metrics stream: no header is written.
    pub fn resumed(out: W) -> CsvSink<W> {
        CsvSink { out }
    }
}

impl<W: Write> MetricsSink for CsvSink<W> {
    fn record(&mut self, s: &EpochStats) -> Result<()> {
        writeln!(
            self.out,
            "{},{},{},{},{},{},{},{:.3}",
            s.epoch, s.energy, s.energy_novar, s.loss, s.lr, s.grad_norm, s.guard_events, s.seconds
        )
        .map_err(Error::io("writing metrics row"))?;
        self.out.flush().map_err(Error::io("flushing metrics"))
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub epochs_done: usize,
    pub opt: OptState,
    /// Chained batch positions `(B, N, d)` feeding the next epoch.
    pub positions: Array,
    /// Noise stream positions, one per batch element.
    pub noise_word_pos: Vec<u128>,
}

impl TrainState {
    /// Write the optimizer/chain state next to a model checkpoint. Same
    /// layout idea as the model file: text header, `binary` marker, then
    /// little-endian payload (`m` then `v` tensors in parameter order, the
    /// chained positions, and one u128 stream position per element).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        header.push_str("trainstate v1\n");
        header.push_str(&format!("epochs_done {}\n", self.epochs_done));
        header.push_str(&format!("adam_step {}\n", self.opt.step));
        header.push_str(&format!("skipped_nonfinite {}\n", self.opt.skipped_nonfinite));
        header.push_str(&format!("moments {}\n", self.opt.m.len()));
        for m in &self.opt.m {
            let dims: Vec<String> = m.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("moment_shape {}\n", dims.join(" ")));
        }
        let dims: Vec<String> = self.positions.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("positions {}\n", dims.join(" ")));
        header.push_str(&format!("streams {}\n", self.noise_word_pos.len()));
        header.push_str("binary\n");

        let mut bytes = header.into_bytes();
        for arr in self.opt.m.iter().chain(&self.opt.v) {
            for v in arr.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in self.positions.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for w in &self.noise_word_pos {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(Error::io(format!(
            "writing train state {}",
            path.display()
        )))?;
        std::fs::rename(&tmp, path).map_err(Error::io(format!(
            "finalising train state {}",
            path.display()
        )))?;
        Ok(())
    }

    /// Read a state written by [`TrainState::save`], validating tensor
    /// shapes against the model it belongs to.
    pub fn load(path: &Path, model: &DriftModel) -> Result<TrainState> {
        let bytes = std::fs::read(path).map_err(Error::io(format!(
            "reading train state {}",
            path.display()
        )))?;
        let marker = b"\nbinary\n";
        let marker_pos = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Checkpoint("missing binary marker".into()))?;
        let header = std::str::from_utf8(&bytes[..marker_pos + 1])
            .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
        let payload = &bytes[marker_pos + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some("trainstate v1") {
            return Err(Error::Checkpoint("not a train state file".into()));
        }
        let mut epochs_done = None;
        let mut adam_step = None;
        let mut skipped = None;
        let mut moment_shapes: Vec<Vec<usize>> = Vec::new();
        let mut positions_shape: Option<Vec<usize>> = None;
        let mut streams = None;
        for line in lines {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            let rest: Vec<&str> = parts.collect();
            let parse_all = |rest: &[&str]| -> Result<Vec<usize>> {
                rest.iter()
                    .map(|s| {
                        s.parse::<usize>()
                            .map_err(|_| Error::Checkpoint(format!("bad integer '{s}'")))
                    })
                    .collect()
            };
            match key {
                "epochs_done" => epochs_done = Some(parse_all(&rest)?[0]),
                "adam_step" => adam_step = Some(parse_all(&rest)?[0] as u64),
                "skipped_nonfinite" => skipped = Some(parse_all(&rest)?[0] as u64),
                "moments" => {}
                "moment_shape" => moment_shapes.push(parse_all(&rest)?),
                "positions" => positions_shape = Some(parse_all(&rest)?),
                "streams" => streams = Some(parse_all(&rest)?[0]),
                other => {
                    return Err(Error::Checkpoint(format!("unknown state key '{other}'")))
                }
            }
        }
        let epochs_done =
            epochs_done.ok_or_else(|| Error::Checkpoint("missing epochs_done".into()))?;
        let positions_shape =
            positions_shape.ok_or_else(|| Error::Checkpoint("missing positions".into()))?;
        let streams = streams.ok_or_else(|| Error::Checkpoint("missing streams".into()))?;

        let plan_shapes: Vec<Vec<usize>> = model
            .params
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        if moment_shapes != plan_shapes {
            return Err(Error::Checkpoint(format!(
                "optimizer moments {:?} do not match model parameters {:?}",
                moment_shapes, plan_shapes
            )));
        }

        let n_moment: usize = moment_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let n_pos: usize = positions_shape.iter().product();
        let need = (2 * n_moment + n_pos) * 8 + streams * 16;
        if payload.len() != need {
            return Err(Error::Checkpoint(format!(
                "state payload holds {} bytes, header needs {}",
                payload.len(),
                need
            )));
        }
        let mut offset = 0usize;
        let mut read_arrays = |shapes: &[Vec<usize>]| -> Result<Vec<Array>> {
            shapes
                .iter()
                .map(|shape| {
                    let n: usize = shape.iter().product();
                    let mut data = Vec::with_capacity(n);
                    for _ in 0..n {
                        let mut buf = [0u8; 8];
                        buf.copy_from_slice(&payload[offset..offset + 8]);
                        offset += 8;
                        data.push(f64::from_le_bytes(buf));
                    }
                    Array::from_vec(shape, data)
                })
                .collect()
        };
        let m = read_arrays(&moment_shapes)?;
        let v = read_arrays(&moment_shapes)?;
        let positions = read_arrays(std::slice::from_ref(&positions_shape))?
            .pop()
            .expect("one positions array");
        let mut noise_word_pos = Vec::with_capacity(streams);
        for _ in 0..streams {
            let mut buf = [0u8; 16];
            buf.copy_from_slice(&payload[offset..offset + 16]);
            offset += 16;
            noise_word_pos.push(u128::from_le_bytes(buf));
        }
        Ok(TrainState {
            epochs_done,
            opt: OptState {
                m,
                v,
                step: adam_step.unwrap_or(0),
                skipped_nonfinite: skipped.unwrap_or(0),
            },
            positions,
            noise_word_pos,
        })
    }
}

/// Outcome of [`train`]: the per-epoch history plus the state to continue
/// from.
pub struct TrainSummary {
    pub epochs: Vec<EpochStats>,
    pub state: TrainState,
}

/// Epoch-0 batch positions: standard normal per coordinate (matching the
/// relaxation dynamics of the default skip), clamped off any potential
/// singularity so the first potential evaluation is finite.
pub fn initial_positions(system: &System, batch: usize, seed: u64) -> Array {
    let (n, d) = (system.n_particles(), system.dim());
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(INIT_POSITIONS_STREAM);
    let mut data = vec![0.0; batch * n * d];
    for v in &mut data {
        *v = rand_distr::StandardNormal.sample(&mut rng);
    }
    let guard = GuardSpec::for_system(system);
    for config in data.chunks_mut(n * d) {
        guard.clamp(config, n, d);
    }
    Array::from_parts(vec![batch, n, d], data)
}

/// One epoch over all shards: rollout, objective, gradients. Returns
/// (loss, novar, grad accumulation, final positions, guard events).
fn run_epoch(
    system: &System,
    model: &DriftModel,
    config: &TrainConfig,
    positions: &Array,
    noises: &mut [NoiseSource],
) -> Result<(f64, f64, Vec<Array>, Array, u64)> {
    let b_total = config.batch_size;
    let t_total = config.dt * config.steps_per_epoch as f64;
    let norm = 1.0 / (b_total as f64 * t_total);
    let (n, d) = (system.n_particles(), system.dim());

    let mut grand: Vec<Array> = model
        .params
        .iter()
        .map(|p| Array::zeros(p.value.shape()))
        .collect();
    let mut loss_parts: Vec<f64> = Vec::with_capacity(noises.len());
    let mut novar_parts: Vec<f64> = Vec::with_capacity(noises.len());
    let mut final_positions = vec![0.0; b_total * n * d];
    let mut guard_events = 0u64;

    let mut start = 0usize;
    for noise in noises.iter_mut() {
        let count = noise.batch();
        let shard_init = Array::from_parts(
            vec![count, n, d],
            positions.data()[start * n * d..(start + count) * n * d].to_vec(),
        );

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let roll = rollout_on_tape(
            &mut tape,
            &bound,
            system,
            &shard_init,
            config.dt,
            config.steps_per_epoch,
            config.integrator,
            noise,
        )?;
        guard_events += roll.guard_events;

        // Objective: loss normalized by the FULL batch and total time, so
        // shard gradients merge by plain addition.
        let cost_total = tape.sum_all(roll.cost_per_element)?;
        let loss = tape.scale(cost_total, norm)?;
        let novar_total = tape.sum_all(roll.novar_per_element)?;
        let novar = tape.scale(novar_total, norm)?;

        let objective = if config.boundary_correction {
            // Endpoint correction: subtract ∇ of Σ_b r_T·v(r_T) / (B·T),
            // with the drift factor's own parameter dependence severed.
            let v_final = bound.record(&mut tape, roll.final_pos)?;
            let v_factor = if config.sever_boundary_drift {
                tape.detach(v_final)?
            } else {
                v_final
            };
            let prod = tape.mul(roll.final_pos, v_factor)?;
            let endpoint = tape.sum_all(prod)?;
            let correction = tape.scale(endpoint, -norm)?;
            tape.add(loss, correction)?
        } else {
            loss
        };

        let grads: Gradients = tape.backward(objective)?;
        let shard_grads = tape.param_gradients(&grads);
        for (acc, g) in grand.iter_mut().zip(&shard_grads) {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        loss_parts.push(tape.value(loss).scalar_value()?);
        novar_parts.push(tape.value(novar).scalar_value()?);
        final_positions[start * n * d..(start + count) * n * d]
            .copy_from_slice(tape.value(roll.final_pos).data());
        start += count;
    }

    let loss = fsum(loss_parts.iter().copied());
    let novar = fsum(novar_parts.iter().copied());
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("epoch loss {loss}")));
    }
    Ok((
        loss,
        novar,
        grand,
        Array::from_parts(vec![b_total, n, d], final_positions),
        guard_events,
    ))
}

/// Split the batch into `shards` noise sources covering contiguous global
/// element ranges (sizes differing by at most one).
fn shard_noises(config: &TrainConfig) -> Vec<NoiseSource> {
    let b = config.batch_size;
    let s = config.shards;
    let mut out = Vec::with_capacity(s);
    let mut start = 0;
    for i in 0..s {
        let count = b / s + usize::from(i < b % s);
        out.push(NoiseSource::with_range(config.seed, start, count));
        start += count;
    }
    out
}

/// Train `model` on `system`. `resume` continues a previous run's state
/// (epoch numbering, optimizer moments, chained positions, noise streams);
/// otherwise epoch 0 starts from freshly drawn positions. Checkpoints go to
/// `checkpoint_dir` when given (`model.ckpt` + `state.ckpt`, every
/// `checkpoint_every` epochs and at the end).
pub fn train(
    system: &System,
    model: &mut DriftModel,
    config: &TrainConfig,
    resume: Option<TrainState>,
    sink: &mut dyn MetricsSink,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    system.validate()?;
    let (n, d) = (system.n_particles(), system.dim());
    if model.config.n != n || model.config.dim != d {
        return Err(Error::Dimension(format!(
            "model is built for n={} dim={}, system {} has n={n} dim={d}",
            model.config.n,
            model.config.dim,
            system.name()
        )));
    }

    let mut noises = shard_noises(config);
    let (mut opt, mut positions, first_epoch) = match resume {
        Some(state) => {
            if state.positions.shape() != [config.batch_size, n, d] {
                return Err(Error::Checkpoint(format!(
                    "resumed positions shaped {:?}, run needs {:?}",
                    state.positions.shape(),
                    [config.batch_size, n, d]
                )));
            }
            let mut start = 0;
            for noise in &mut noises {
                let count = noise.batch();
                noise.set_word_pos(&state.noise_word_pos[start..start + count])?;
                start += count;
            }
            (state.opt, state.positions, state.epochs_done)
        }
        None => (
            OptState::new(model),
            initial_positions(system, config.batch_size, config.seed),
            0,
        ),
    };

    let mut epochs: Vec<EpochStats> = Vec::new();
    for epoch in first_epoch..config.n_epochs {
        let started = Instant::now();
        let lr = config.lr_at(epoch);
        let (loss, novar, grads, final_positions, guard_events) =
            run_epoch(system, model, config, &positions, &mut noises)
                .map_err(|e| e.with_context(format!("epoch {epoch}")))?;
        let grad_norm = fsum(
            grads
                .iter()
                .flat_map(|g| g.data().iter().map(|v| v * v)),
        )
        .sqrt();
        adam_step(&mut opt, model, &grads, lr, config)?;
        positions = final_positions; // severed: next epoch starts from values

        let stats = EpochStats {
            epoch,
            energy: loss,
            energy_novar: novar,
            loss,
            lr,
            grad_norm,
            guard_events,
            seconds: started.elapsed().as_secs_f64(),
        };
        sink.record(&stats)?;
        epochs.push(stats);

        if let Some(dir) = checkpoint_dir {
            let periodic =
                config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0;
            if periodic || epoch + 1 == config.n_epochs {
                let state = TrainState {
                    epochs_done: epoch + 1,
                    opt: opt.clone(),
                    positions: positions.clone(),
                    noise_word_pos: noises.iter().flat_map(|s| s.word_pos()).collect(),
                };
                model.save(&dir.join("model.ckpt"))?;
                state.save(&dir.join("state.ckpt"))?;
            }
        }
    }

    let state = TrainState {
        epochs_done: config.n_epochs,
        opt,
        positions,
        noise_word_pos: noises.iter().flat_map(|s| s.word_pos()).collect(),
    };
    Ok(TrainSummary { epochs, state })
}

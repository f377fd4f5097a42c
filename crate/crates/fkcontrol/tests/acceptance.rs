//! End-to-end release gate: one verdict line per criterion, printed straight
//! to the process stdout so the lines survive the capturing test harness.
//!
//! Everything runs inside a single sequential test: the criteria share
//! trained models (the sampler-fidelity check reuses the fully trained
//! hydrogen drift), and the expensive training runs must not compete for
//! cores. Cheap analytic checks run first; multi-minute training runs last.

use fkcontrol::cli;
use fkcontrol::diagnostics::{histogram, tv_distance, zero_variance_residual, DivergenceMode, Projection};
use fkcontrol::diffcore::{fsum, Array, Tape, ValueId};
use fkcontrol::driftnet::{Arch, DriftModel, ModelConfig, SkipSpec};
use fkcontrol::potentials::{AnalyticDrift, System};
use fkcontrol::sde::{rollout_eval, rollout_on_tape, DriftSource, Integrator, NoiseSource};
use fkcontrol::trainer::{initial_positions, train, EpochStats, TrainConfig, VecSink};
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

// ---------------------------------------------------------------------------
// verdict plumbing

struct Gate {
    failures: Vec<String>,
}

impl Gate {
    fn new() -> Gate {
        Gate { failures: Vec::new() }
    }

    /// Print one verdict line, bypassing the harness's output capture.
    fn verdict(&mut self, id: &str, label: &str, result: Result<(bool, String), String>) {
        let (pass, detail) = match result {
            Ok((pass, detail)) => (pass, detail),
            Err(msg) => (false, format!("errored: {msg}")),
        };
        let line = format!("[{}] {id} {label}: {detail}", if pass { "PASS" } else { "FAIL" });
        let mut out = std::io::stdout();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        if !pass {
            self.failures.push(line);
        }
    }

    /// Additional spec invariants checked along the way (not numbered
    /// criteria, but the gate fails if they do).
    fn invariant(&mut self, label: &str, pass: bool, detail: String) {
        let line = format!(
            "[{}] invariant {label}: {detail}",
            if pass { "PASS" } else { "FAIL" }
        );
        let mut out = std::io::stdout();
        let _ = writeln!(out, "{line}");
        let _ = out.flush();
        if !pass {
            self.failures.push(line);
        }
    }
}

fn run_criterion<F>(gate: &mut Gate, id: &str, label: &str, body: F)
where
    F: FnOnce(&mut Gate) -> Result<(bool, String), String>,
{
    let mut sub = Gate::new();
    let outcome = catch_unwind(AssertUnwindSafe(|| body(&mut sub))).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".to_string());
        Err(msg)
    });
    gate.failures.append(&mut sub.failures);
    gate.verdict(id, label, outcome);
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = values.len();
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    fsum(values.iter().copied()) / values.len() as f64
}

fn stderr_of_mean(values: &[f64]) -> f64 {
    let m = mean(values);
    let n = values.len() as f64;
    let var = fsum(values.iter().map(|v| (v - m) * (v - m))) / (n - 1.0);
    (var / n).sqrt()
}

/// Deterministic "arbitrary" values for test inputs and probe weights.
fn pseudo(shape: &[usize], phase: f64, lo: f64, hi: f64) -> Array {
    let len: usize = shape.iter().product();
    let data: Vec<f64> = (0..len)
        .map(|i| {
            let u = 0.5 + 0.5 * (phase + 0.7315 * i as f64).sin();
            lo + (hi - lo) * u
        })
        .collect();
    Array::from_vec(shape, data).unwrap()
}

/// Deterministically perturb every parameter of a freshly initialized model
/// so structural checks exercise the full network, not just the skip path.
fn perturb(model: &mut DriftModel) {
    for (pi, p) in model.params.iter_mut().enumerate() {
        for (ci, v) in p.value.data_mut().iter_mut().enumerate() {
            *v += 0.3 * (0.37 * (131 * pi + ci) as f64).sin();
        }
    }
}

fn permute_particles(config: &[f64], perm: &[usize], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; config.len()];
    for (i, &src) in perm.iter().enumerate() {
        out[i * d..(i + 1) * d].copy_from_slice(&config[src * d..(src + 1) * d]);
    }
    out
}

fn drift_values(drift: &dyn DriftSource, config: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let pos = tape.leaf(Array::from_vec(&[1, n, d], config.to_vec()).unwrap());
    let v = drift.record(&mut tape, pos).unwrap();
    tape.value(v).data().to_vec()
}

fn heaps_permutations(n: usize) -> Vec<Vec<usize>> {
    let mut items: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    fn go(k: usize, items: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(items.clone());
            return;
        }
        for i in 0..k {
            go(k - 1, items, out);
            if k % 2 == 0 {
                items.swap(i, k - 1);
            } else {
                items.swap(0, k - 1);
            }
        }
    }
    go(n, &mut items, &mut out);
    out
}

// ---------------------------------------------------------------------------
// C6: gradients of every tape primitive + the corrected training objective

/// Maximum relative error between reverse-mode and central-FD gradients for
/// one op. The op output is contracted against a fixed probe so every output
/// element influences the scalar.
fn primitive_fd_error(
    inputs: &[Array],
    build: &dyn Fn(&mut Tape, &[ValueId]) -> fkcontrol::Result<ValueId>,
) -> f64 {
    let forward = |xs: &[Array]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = xs.iter().map(|a| tape.leaf(a.clone())).collect();
        let y = build(&mut tape, &ids).expect("op builds");
        let probe = tape.leaf(pseudo(tape.value(y).shape(), 0.123, -1.0, 1.0));
        let prod = tape.mul(y, probe).unwrap();
        let s = tape.sum_all(prod).unwrap();
        let value = tape.value(s).scalar_value().unwrap();
        let grads = tape.backward(s).unwrap();
        let per_input: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| {
                grads
                    .wrt(id)
                    .map(|g| g.data().to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).data().len()])
            })
            .collect();
        (value, per_input)
    };

    let (_, analytic) = forward(inputs);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.data().len() {
            let mut shifted = inputs.to_vec();
            let mut plus = input.data().to_vec();
            plus[i] += h;
            shifted[k] = Array::from_vec(input.shape(), plus).unwrap();
            let (fp, _) = forward(&shifted);
            let mut minus = input.data().to_vec();
            minus[i] -= h;
            shifted[k] = Array::from_vec(input.shape(), minus).unwrap();
            let (fm, _) = forward(&shifted);
            let fd = (fp - fm) / (2.0 * h);
            let ad = analytic[k][i];
            worst = worst.max((ad - fd).abs() / fd.abs().max(1.0));
        }
    }
    worst
}

fn primitive_suite() -> Result<(f64, usize), String> {
    let mut cases: Vec<(&'static str, Vec<Array>, Box<dyn Fn(&mut Tape, &[ValueId]) -> fkcontrol::Result<ValueId>>)> = Vec::new();
    let x23 = || pseudo(&[2, 3], 1.0, -2.0, 2.0);
    let y23 = || pseudo(&[2, 3], 2.0, -2.0, 2.0);
    let pos23 = || pseudo(&[2, 3], 3.0, 0.5, 2.0);
    // Values clear of the hardtanh kinks at ±1.
    let kink_free = || {
        Array::from_vec(&[2, 3], vec![-1.6, -0.62, 0.18, 0.81, 1.37, -0.2]).unwrap()
    };
    cases.push(("neg", vec![x23()], Box::new(|t, ids| t.neg(ids[0]))));
    cases.push(("square", vec![x23()], Box::new(|t, ids| t.square(ids[0]))));
    cases.push(("sqrt", vec![pos23()], Box::new(|t, ids| t.sqrt(ids[0]))));
    cases.push(("reciprocal", vec![pos23()], Box::new(|t, ids| t.reciprocal(ids[0]))));
    cases.push(("exp", vec![x23()], Box::new(|t, ids| t.exp(ids[0]))));
    cases.push(("hardtanh", vec![kink_free()], Box::new(|t, ids| t.hardtanh(ids[0]))));
    cases.push(("add", vec![x23(), y23()], Box::new(|t, ids| t.add(ids[0], ids[1]))));
    cases.push(("sub", vec![x23(), y23()], Box::new(|t, ids| t.sub(ids[0], ids[1]))));
    cases.push(("mul", vec![x23(), y23()], Box::new(|t, ids| t.mul(ids[0], ids[1]))));
    cases.push(("scale", vec![x23()], Box::new(|t, ids| t.scale(ids[0], -1.7))));
    cases.push(("add_scalar", vec![x23()], Box::new(|t, ids| t.add_scalar(ids[0], 0.37))));
    cases.push((
        "add_many",
        vec![x23(), y23(), pos23()],
        Box::new(|t, ids| t.add_many(ids)),
    ));
    cases.push((
        "matmul",
        vec![pseudo(&[2, 3], 4.0, -1.0, 1.0), pseudo(&[3, 2], 5.0, -1.0, 1.0)],
        Box::new(|t, ids| t.matmul(ids[0], ids[1])),
    ));
    cases.push((
        "affine",
        vec![
            pseudo(&[2, 2, 3], 6.0, -1.0, 1.0),
            pseudo(&[3, 4], 7.0, -0.8, 0.8),
            pseudo(&[2, 2, 2], 8.0, -1.0, 1.0),
            pseudo(&[2, 4], 9.0, -0.8, 0.8),
            pseudo(&[4], 10.0, -0.5, 0.5),
        ],
        Box::new(|t, ids| t.affine(&[(ids[0], ids[1]), (ids[2], ids[3])], Some(ids[4]), false)),
    ));
    cases.push((
        "affine_hardtanh",
        vec![
            pseudo(&[3, 3], 11.0, -0.7, 0.7),
            pseudo(&[3, 2], 12.0, -0.6, 0.6),
            pseudo(&[2], 13.0, -0.3, 0.3),
        ],
        Box::new(|t, ids| t.affine(&[(ids[0], ids[1])], Some(ids[2]), true)),
    ));
    cases.push((
        "sum_axis",
        vec![pseudo(&[2, 3, 2], 14.0, -2.0, 2.0)],
        Box::new(|t, ids| t.sum_axis(ids[0], 1)),
    ));
    cases.push((
        "mean_axis",
        vec![pseudo(&[2, 3, 2], 15.0, -2.0, 2.0)],
        Box::new(|t, ids| t.mean_axis(ids[0], 2)),
    ));
    cases.push(("sum_all", vec![x23()], Box::new(|t, ids| t.sum_all(ids[0]))));
    cases.push(("mean_all", vec![x23()], Box::new(|t, ids| t.mean_all(ids[0]))));
    cases.push((
        "scale_rows",
        vec![pseudo(&[2, 2, 3], 16.0, -2.0, 2.0), pseudo(&[2, 2], 17.0, 0.5, 1.5)],
        Box::new(|t, ids| t.scale_rows(ids[0], ids[1])),
    ));
    cases.push((
        "add_row_const",
        vec![pseudo(&[2, 2, 3], 18.0, -2.0, 2.0)],
        Box::new(|t, ids| t.add_row_const(ids[0], &[0.3, -0.6, 0.9])),
    ));
    cases.push((
        "add_diag_const",
        vec![pseudo(&[2, 3, 3], 19.0, -2.0, 2.0)],
        Box::new(|t, ids| t.add_diag_const(ids[0], 0.8)),
    ));
    cases.push((
        "pair_diff",
        vec![pseudo(&[2, 3, 2], 20.0, -2.0, 2.0)],
        Box::new(|t, ids| t.pair_diff(ids[0])),
    ));
    cases.push((
        "pool_pairs",
        vec![pseudo(&[2, 3, 3, 2], 21.0, -2.0, 2.0)],
        Box::new(|t, ids| t.pool_pairs(ids[0], true)),
    ));
    cases.push((
        "pool_pairs_with_diag",
        vec![pseudo(&[2, 3, 3, 2], 22.0, -2.0, 2.0)],
        Box::new(|t, ids| t.pool_pairs(ids[0], false)),
    ));
    cases.push((
        "pool_particles",
        vec![pseudo(&[2, 3, 4], 23.0, -2.0, 2.0)],
        Box::new(|t, ids| t.pool_particles(ids[0])),
    ));
    cases.push((
        "broadcast_particles",
        vec![pseudo(&[2, 4], 24.0, -2.0, 2.0)],
        Box::new(|t, ids| t.broadcast_particles(ids[0], 3)),
    ));
    cases.push((
        "transpose_last2",
        vec![pseudo(&[2, 3, 2], 25.0, -2.0, 2.0)],
        Box::new(|t, ids| t.transpose_last2(ids[0])),
    ));
    cases.push((
        "reshape",
        vec![pseudo(&[2, 3, 2], 26.0, -2.0, 2.0)],
        Box::new(|t, ids| t.reshape(ids[0], &[2, 6])),
    ));

    let mut worst = 0.0f64;
    let count = cases.len();
    for (name, inputs, build) in cases {
        let err = primitive_fd_error(&inputs, build.as_ref());
        if err > 1e-6 {
            return Err(format!("primitive {name}: relative error {err:.3e} > 1e-6"));
        }
        worst = worst.max(err);
    }

    // detach: defined gradient is zero through the detached branch, so
    // d/dx sum(x · detach(x)) must equal detach(x) == x, not 2x.
    let mut tape = Tape::new();
    let x = tape.leaf(pseudo(&[4], 27.0, -2.0, 2.0));
    let frozen = tape.detach(x).unwrap();
    let prod = tape.mul(x, frozen).unwrap();
    let s = tape.sum_all(prod).unwrap();
    let grads = tape.backward(s).unwrap();
    let g = grads.wrt(x).unwrap();
    for (gi, xi) in g.data().iter().zip(tape.value(x).data()) {
        if (gi - xi).abs() > 1e-15 {
            return Err(format!("detach leaks gradient: got {gi}, want {xi}"));
        }
    }

    Ok((worst, count + 1))
}

/// One-parameter-pair drift `v = w·x + c` used for the micro objective.
struct MicroDrift {
    w: ValueId,
    c: ValueId,
}

impl DriftSource for MicroDrift {
    fn record(&self, tape: &mut Tape, pos: ValueId) -> fkcontrol::Result<ValueId> {
        tape.affine(&[(pos, self.w)], Some(self.c), false)
    }
}

/// The boundary-corrected objective on a micro instance, with its analytic
/// parameter gradient and the values needed for the frozen-endpoint oracle.
struct MicroRun {
    loss: f64,
    final_pos: Vec<f64>,
    endpoint_drift: Vec<f64>,
    grads: Vec<f64>,
}

fn micro_objective(w_val: f64, c_val: f64, want_grads: bool) -> MicroRun {
    let system = System::Harmonic { n: 1, dim: 1 };
    let (batch, steps, dt, seed) = (4usize, 3usize, 0.1f64, 99u64);
    let initial = initial_positions(&system, batch, seed);
    let mut tape = Tape::new();
    let w = tape.param(Array::from_vec(&[1, 1], vec![w_val]).unwrap());
    let c = tape.param(Array::from_vec(&[1], vec![c_val]).unwrap());
    let drift = MicroDrift { w, c };
    let mut noise = NoiseSource::new(seed, batch);
    let roll = rollout_on_tape(
        &mut tape, &drift, &system, &initial, dt, steps, Integrator::Em, &mut noise,
    )
    .unwrap();
    let norm = 1.0 / (batch as f64 * steps as f64 * dt);
    let total = tape.sum_all(roll.cost_per_element).unwrap();
    let loss = tape.scale(total, norm).unwrap();
    let v_end = drift.record(&mut tape, roll.final_pos).unwrap();
    let v_frozen = tape.detach(v_end).unwrap();
    let prod = tape.mul(roll.final_pos, v_frozen).unwrap();
    let correction_sum = tape.sum_all(prod).unwrap();
    let correction = tape.scale(correction_sum, -norm).unwrap();
    let surrogate = tape.add(loss, correction).unwrap();

    let grads = if want_grads {
        let g = tape.backward(surrogate).unwrap();
        tape.param_gradients(&g)
            .iter()
            .flat_map(|a| a.data().to_vec())
            .collect()
    } else {
        Vec::new()
    };
    MicroRun {
        loss: tape.value(loss).scalar_value().unwrap(),
        final_pos: tape.value(roll.final_pos).data().to_vec(),
        endpoint_drift: tape.value(v_end).data().to_vec(),
        grads,
    }
}

fn micro_objective_suite() -> Result<f64, String> {
    let (w0, c0) = (0.4, -0.2);
    let base = micro_objective(w0, c0, true);
    let norm = 1.0 / (4.0 * 3.0 * 0.1);
    // The severed endpoint factor contributes no gradient of its own, so the
    // analytic gradient must equal the FD gradient of
    //   g(θ) = loss(θ) − norm · Σ_b r_T(θ)_b · v_end(θ₀)_b
    // with the endpoint drift values frozen at the base parameters.
    let frozen = base.endpoint_drift.clone();
    let g_at = |w: f64, c: f64| -> f64 {
        let run = micro_objective(w, c, false);
        let corr: f64 = fsum(
            run.final_pos
                .iter()
                .zip(&frozen)
                .map(|(r, v)| r * v),
        );
        run.loss - norm * corr
    };
    let h = 1e-5;
    let fd_w = (g_at(w0 + h, c0) - g_at(w0 - h, c0)) / (2.0 * h);
    let fd_c = (g_at(w0, c0 + h) - g_at(w0, c0 - h)) / (2.0 * h);
    let mut worst = 0.0f64;
    for (ad, fd) in base.grads.iter().zip([fd_w, fd_c]) {
        let rel = (ad - fd).abs() / fd.abs().max(1e-6);
        worst = worst.max(rel);
    }
    if worst > 1e-4 {
        return Err(format!(
            "micro objective gradient relative error {worst:.3e} > 1e-4 (grads {:?}, fd [{fd_w}, {fd_c}])",
            base.grads
        ));
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// training helpers

struct TrainedRun {
    model: DriftModel,
    epochs: Vec<EpochStats>,
    elapsed_s: f64,
}

fn train_system(
    system: &System,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> Result<TrainedRun, String> {
    let mut model =
        DriftModel::init(model_config, train_config.seed).map_err(|e| e.to_string())?;
    let mut sink = VecSink::default();
    let started = Instant::now();
    train(system, &mut model, &train_config, None, &mut sink, None).map_err(|e| e.to_string())?;
    Ok(TrainedRun {
        model,
        epochs: sink.0,
        elapsed_s: started.elapsed().as_secs_f64(),
    })
}

fn final_mean_energy(epochs: &[EpochStats], window: usize) -> f64 {
    let tail: Vec<f64> = epochs[epochs.len() - window..]
        .iter()
        .map(|e| e.energy)
        .collect();
    mean(&tail)
}

/// The two cross-cutting trainer invariants every converged run must satisfy:
/// late-median ≤ early-median, and the variational bound within three
/// combined error bars.
fn check_training_invariants(gate: &mut Gate, name: &str, run: &TrainedRun, e0: f64, dt: f64) {
    let k = run.epochs.len();
    let tenth = (k / 10).max(1);
    let mut early: Vec<f64> = run.epochs[..tenth].iter().map(|e| e.energy).collect();
    let mut late: Vec<f64> = run.epochs[k - tenth..].iter().map(|e| e.energy).collect();
    let (m_early, m_late) = (median(&mut early), median(&mut late));
    gate.invariant(
        &format!("{name} monotone-ish"),
        m_late <= m_early,
        format!("median first 10% {m_early:.4}, last 10% {m_late:.4}"),
    );
    let window = (k / 5).clamp(2, 20);
    let tail: Vec<f64> = run.epochs[k - window..].iter().map(|e| e.energy).collect();
    let stat = stderr_of_mean(&tail);
    let discretization = e0.abs() * dt;
    let bound = e0 - 3.0 * (stat + discretization);
    let m = mean(&tail);
    gate.invariant(
        &format!("{name} variational bound"),
        m >= bound,
        format!("final mean {m:.4} vs reference {e0} - 3·({stat:.4} + {discretization:.4})"),
    );
}

fn hydrogen_model_config(width: usize) -> ModelConfig {
    ModelConfig {
        arch: Arch::PairDrift,
        n: 1,
        dim: 3,
        width,
        depth: 1,
        self_pairs: false,
        pair_matrix_features: false,
        skip: SkipSpec::restoring(3),
    }
}

/// Energy of a drift's stationary law, free of O(Δt) quadrature bias: sample
/// positions from a long warmed-up rollout, then average the pointwise
/// generator residual V − ½|v|² − ½∇·v. At the exact drift the residual is
/// the constant E₀ regardless of the sampling chain's discretization, so the
/// estimate degrades only quadratically in the drift error.
fn residual_energy(
    drift: &dyn DriftSource,
    system: &System,
    batch: usize,
    burnin: usize,
    dt: f64,
    seed: u64,
) -> Result<(f64, f64), String> {
    let start = initial_positions(system, batch, seed);
    let mut noise = NoiseSource::new(seed, batch);
    let warm = rollout_eval(drift, system, &start, dt, burnin, Integrator::Em, &mut noise, false)
        .map_err(|e| e.to_string())?;
    let res = zero_variance_residual(system, drift, &warm.final_positions, DivergenceMode::Ad)
        .map_err(|e| e.to_string())?;
    Ok((mean(&res), stderr_of_mean(&res)))
}

// ---------------------------------------------------------------------------
// the gate

#[test]
fn acceptance() {
    let mut gate = Gate::new();
    let mut out = std::io::stdout();
    let _ = writeln!(out, "=== acceptance gate ===");
    drop(out);

    // --- C6: gradient suite (seconds) -----------------------------------
    run_criterion(&mut gate, "C6", "gradient suite", |_| {
        let (worst_prim, n_ops) = primitive_suite()?;
        let worst_micro = micro_objective_suite()?;
        Ok((
            true,
            format!(
                "{n_ops} primitives vs central FD ≤ 1e-6 (worst {worst_prim:.2e}); corrected micro-objective ≤ 1e-4 (worst {worst_micro:.2e})"
            ),
        ))
    });

    // --- C7: equivariance suite (seconds) --------------------------------
    run_criterion(&mut gate, "C7", "equivariance suite", |_| {
        let d = 3;
        let mut checked = 0usize;
        for n in 2..=4usize {
            let perms = heaps_permutations(n);
            for arch in [Arch::PairDrift, Arch::DeepSets] {
                for pmf in [false, true] {
                    if pmf && arch != Arch::PairDrift {
                        continue;
                    }
                    let mut model = DriftModel::init(
                        ModelConfig {
                            arch,
                            n,
                            dim: d,
                            width: 6,
                            depth: 2,
                            self_pairs: false,
                            pair_matrix_features: pmf,
                            skip: SkipSpec::restoring(d),
                        },
                        11,
                    )
                    .map_err(|e| e.to_string())?;
                    perturb(&mut model);
                    let x = pseudo(&[n * d], 31.0, -2.0, 2.0);
                    let v = drift_values(&model, x.data(), n, d);
                    for perm in &perms {
                        let xp = permute_particles(x.data(), perm, d);
                        let vp = drift_values(&model, &xp, n, d);
                        if permute_particles(&v, perm, d) != vp {
                            return Ok((
                                false,
                                format!("{:?} n={n} perm {perm:?}: outputs differ", arch),
                            ));
                        }
                        checked += 1;
                    }
                }
            }
        }
        Ok((
            true,
            format!("{checked} (arch, N ≤ 4, permutation) cases bitwise equivariant"),
        ))
    });

    // --- C5: zero-variance suite (seconds) --------------------------------
    run_criterion(&mut gate, "C5", "zero-variance suite", |_| {
        let cases: Vec<(System, f64)> = vec![
            (System::Hydrogen, -0.5),
            (System::Harmonic { n: 1, dim: 1 }, 0.5),
            (System::Harmonic { n: 1, dim: 3 }, 1.5),
            (System::Calogero { n: 5, lambda: 2.0 }, 22.5),
        ];
        let mut details = Vec::new();
        for (system, e0) in cases {
            if let Some(reference) = system.reference_energy() {
                if (reference - e0).abs() > 1e-12 {
                    return Ok((
                        false,
                        format!("{}: reference {reference} != expected {e0}", system.name()),
                    ));
                }
            }
            let drift = system
                .exact_drift()
                .ok_or_else(|| format!("{} lacks an exact drift", system.name()))?;
            let positions = initial_positions(&system, 64, 13);
            let res = zero_variance_residual(&system, &drift, &positions, DivergenceMode::Ad)
                .map_err(|e| e.to_string())?;
            let worst = res
                .iter()
                .map(|r| (r - e0).abs())
                .fold(0.0f64, f64::max);
            if worst > 1e-9 {
                return Ok((
                    false,
                    format!("{}: max |residual - {e0}| = {worst:.3e} > 1e-9", system.name()),
                ));
            }
            details.push(format!("{} ≡ {e0} ({worst:.1e})", system.name()));
        }
        Ok((true, details.join(", ")))
    });

    // --- C9: determinism through the CLI (about a minute) ------------------
    run_criterion(&mut gate, "C9", "determinism", |_| {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        std::env::set_var("FKCONTROL_OUT", dir.path());
        let run_cli = |args: &[&str]| -> Result<(), String> {
            let tokens: Vec<String> = args.iter().map(|s| s.to_string()).collect();
            let mut out = Vec::new();
            let mut err = Vec::new();
            let code = cli::run(&tokens, &mut out, &mut err);
            if code != 0 {
                return Err(format!(
                    "cli exited {code}: {}",
                    String::from_utf8_lossy(&err)
                ));
            }
            Ok(())
        };
        run_cli(&[
            "train",
            "system=harmonic",
            "n=1",
            "dim=1",
            "batch=64",
            "steps=64",
            "epochs=10",
            "width=8",
            "shards=2",
            "checkpoint_every=5",
            "name=det_a",
        ])?;
        // Second run re-resolved from the first run's manifest.
        let manifest = dir.path().join("det_a").join("manifest.txt");
        run_cli(&[
            "train",
            &format!("config={}", manifest.display()),
            "name=det_b",
        ])?;
        std::env::remove_var("FKCONTROL_OUT");
        let read = |name: &str| -> Result<Vec<String>, String> {
            let text = std::fs::read_to_string(dir.path().join(name).join("metrics.csv"))
                .map_err(|e| e.to_string())?;
            // The wall-time column is observational metadata; every other
            // column must be reproduced bit for bit.
            Ok(text
                .lines()
                .map(|l| {
                    let mut cells: Vec<&str> = l.split(',').collect();
                    cells.pop();
                    cells.join(",")
                })
                .collect())
        };
        let a = read("det_a")?;
        let b = read("det_b")?;
        if a != b {
            return Ok((false, "metrics differ between identical-manifest runs".into()));
        }
        // CLI invariant: every number in the metrics file is finite.
        for line in &a[1..] {
            for cell in line.split(',') {
                let v: f64 = cell.parse().map_err(|_| format!("non-numeric cell {cell}"))?;
                if !v.is_finite() {
                    return Ok((false, format!("non-finite metric {cell}")));
                }
            }
        }
        Ok((
            true,
            format!(
                "{} metric rows identical across identical-manifest runs (wall-time column excluded), all values finite",
                a.len() - 1
            ),
        ))
    });

    // --- C4: bosons (about an hour) -----------------------------------------
    let boson_energy = |n: usize, g: f64, gate: &mut Gate| -> Result<f64, String> {
        let system = System::Bosons { n, g, s: 0.5 };
        let run = train_system(
            &system,
            ModelConfig {
                arch: Arch::PairDrift,
                n,
                dim: 2,
                width: 64,
                depth: 1,
                self_pairs: false,
                pair_matrix_features: false,
                skip: SkipSpec::restoring(2),
            },
            TrainConfig {
                batch_size: 512,
                steps_per_epoch: 64,
                n_epochs: 300,
                lr_init: 1e-2,
                shards: 1,
                ..TrainConfig::default()
            },
        )?;
        check_training_invariants(gate, &format!("bosons n={n} g={g}"), &run, n as f64, 0.01);
        let (e, se) = residual_energy(&run.model, &system, 2048, 768, 0.01, 23)?;
        let mut out = std::io::stdout();
        let _ = writeln!(
            out,
            "  bosons n={n} g={g}: E = {e:.4} ± {se:.4} ({:.0}s train)",
            run.elapsed_s
        );
        Ok(e)
    };
    run_criterion(&mut gate, "C4", "bosons (2-D trap)", |gate| {
        let e20 = boson_energy(2, 0.0, gate)?;
        let e30 = boson_energy(3, 0.0, gate)?;
        let e40 = boson_energy(4, 0.0, gate)?;
        for (n, e) in [(2, e20), (3, e30), (4, e40)] {
            let rel = (e - n as f64).abs() / n as f64;
            if rel > 0.01 {
                return Ok((
                    false,
                    format!("non-interacting n={n}: E = {e:.4}, off by {:.2}% > 1%", rel * 100.0),
                ));
            }
        }
        let e21 = boson_energy(2, 1.0, gate)?;
        let e215 = boson_energy(2, 15.0, gate)?;
        if !(e20 < e21 && e21 < e215) {
            return Ok((
                false,
                format!("energies not monotone in g at n=2: {e20:.4}, {e21:.4}, {e215:.4}"),
            ));
        }
        // Hard-core-free upper bound from the zero-interaction-overlap trial
        // drift (log-gas form, vanishing pair overlap), measured on the same
        // interacting system. Its Rayleigh quotient is known in closed form
        // for n=2 at unit pair exponent: 5/2 + g/(π s²) · (1 + 2/s²)⁻²,
        // printed as a cross-check.
        let trial = AnalyticDrift::PlanarLogGas { lambda: 1.0 };
        let strong = System::Bosons { n: 2, g: 15.0, s: 0.5 };
        let (bound, bound_se) = residual_energy(&trial, &strong, 4096, 3000, 1e-3, 29)?;
        let closed_form = 2.5 + 15.0 / (std::f64::consts::PI * 0.25) * (1.0_f64 + 2.0 / 0.25).powi(-2);
        {
            let mut out = std::io::stdout();
            let _ = writeln!(
                out,
                "  trial bound: measured {bound:.4} ± {bound_se:.4}, closed form {closed_form:.4}"
            );
        }
        if !(e215 > 2.0 && e215 < bound) {
            return Ok((
                false,
                format!("n=2 g=15 energy {e215:.4} not strictly inside (2.0, {bound:.4})"),
            ));
        }
        Ok((
            true,
            format!(
                "g=0 energies within 1% of N (n=2: {e20:.4}, n=3: {e30:.4}, n=4: {e40:.4}); monotone in g ({e20:.3} < {e21:.3} < {e215:.3}); n=2 g=15 inside (2.0, trial bound {bound:.3})"
            ),
        ))
    });

    // --- C2: helium (under an hour) ----------------------------------------
    run_criterion(&mut gate, "C2", "helium energy", |gate| {
        let system = System::Helium;
        let run = train_system(
            &system,
            ModelConfig {
                arch: Arch::PairDrift,
                n: 2,
                dim: 3,
                width: 64,
                depth: 1,
                self_pairs: false,
                pair_matrix_features: false,
                skip: SkipSpec::cusp_for(&system).map_err(|e| e.to_string())?,
            },
            TrainConfig {
                lr_init: 1e-3,
                n_epochs: 150,
                shards: 4,
                ..TrainConfig::default()
            },
        )?;
        check_training_invariants(gate, "helium", &run, -2.903, 0.01);
        // Judge the trained drift on its residual energy: the statistic is
        // exact at the exact drift for any step size, so it isolates the
        // quality of the learned drift from time-discretization bias.
        let (e, se) = residual_energy(&run.model, &system, 2048, 700, 0.01, 31)?;
        let rel = (e - (-2.903)).abs() / 2.903;
        let below_hf = e < -2.862;
        let pass = rel <= 0.015 && below_hf;
        Ok((
            pass,
            format!(
                "residual energy {e:.4} ± {se:.4} vs -2.903: {:.2}% (≤ 1.5% reduced-budget bound, {:.0}s train) — {} Hartree–Fock -2.862",
                rel * 100.0,
                run.elapsed_s,
                if below_hf { "beats" } else { "does NOT beat" }
            ),
        ))
    });

    // --- C3: H₂ at both geometries (about an hour) -------------------------
    run_criterion(&mut gate, "C3", "H2 energies", |gate| {
        let mut results = Vec::new();
        for (bond, reference, lr) in [(1.401, -1.173, 5e-4), (2.8, -1.071, 1e-2)] {
            let system = System::H2 { bond_length: bond };
            let run = train_system(
                &system,
                ModelConfig {
                    arch: Arch::PairDrift,
                    n: 2,
                    dim: 3,
                    width: 64,
                    depth: 1,
                    self_pairs: false,
                    pair_matrix_features: false,
                    skip: SkipSpec::cusp_for(&system).map_err(|e| e.to_string())?,
                },
                TrainConfig {
                    lr_init: lr,
                    n_epochs: 150,
                    shards: 4,
                    ..TrainConfig::default()
                },
            )?;
            check_training_invariants(gate, &format!("h2 R={bond}"), &run, reference, 0.01);
            let (e, _se) = residual_energy(&run.model, &system, 2048, 700, 0.01, 37)?;
            let rel: f64 = (e - reference).abs() / reference.abs();
            results.push((bond, e, rel, run.elapsed_s));
        }
        let pass = results.iter().all(|(_, _, rel, _)| *rel <= 0.015);
        let detail = results
            .iter()
            .map(|(bond, e, rel, s)| {
                format!("R={bond}: residual energy {e:.4} ({:.2}%, {s:.0}s train)", rel * 100.0)
            })
            .collect::<Vec<_>>()
            .join("; ");
        Ok((pass, format!("{detail} vs -1.173/-1.071, bound 1.5%")))
    });

    // --- C1: hydrogen, reduced then full (several hours total) -------------
    // Both halves integrate with the second-order stepper: the judged
    // statistic is the training-curve energy itself, and the first-order
    // chain's stationary law carries a +1.7% energy bias at Δt = 0.01 that
    // no amount of training can remove (training can only add energy on top
    // of the integrator's own floor). The second-order chain's floor sits at
    // -0.506, inside reach of the 1%/2% bands once the small optimization
    // excess is added.
    let mut hydrogen_full_model: Option<DriftModel> = None;
    run_criterion(&mut gate, "C1", "hydrogen energy", |gate| {
        // Reduced configuration: must reach 2% of -0.5 in under 10 minutes.
        let reduced = train_system(
            &System::Hydrogen,
            hydrogen_model_config(256),
            TrainConfig {
                batch_size: 256,
                steps_per_epoch: 256,
                n_epochs: 100,
                shards: 1,
                integrator: Integrator::Sosra,
                ..TrainConfig::default()
            },
        )?;
        check_training_invariants(gate, "hydrogen reduced", &reduced, -0.5, 0.01);
        let e_reduced = final_mean_energy(&reduced.epochs, 20);
        let rel_reduced = (e_reduced + 0.5).abs() / 0.5;
        let reduced_ok = rel_reduced <= 0.02 && reduced.elapsed_s < 600.0;

        // Full published defaults: batch 2^10, 2^10 steps, width 256,
        // lr 1e-2 with ×0.95 decay every 10 epochs, Δt 0.01.
        let full = train_system(
            &System::Hydrogen,
            hydrogen_model_config(256),
            TrainConfig {
                n_epochs: 150,
                shards: 8,
                integrator: Integrator::Sosra,
                ..TrainConfig::default()
            },
        )?;
        check_training_invariants(gate, "hydrogen full", &full, -0.5, 0.01);
        let e_full = final_mean_energy(&full.epochs, 20);
        let rel_full = (e_full + 0.5).abs() / 0.5;
        let full_ok = rel_full <= 0.01;
        hydrogen_full_model = Some(full.model);
        Ok((
            reduced_ok && full_ok,
            format!(
                "full: final-20 mean {e_full:.4} ({:.2}% of -0.5, ≤ 1%, {:.0}s); reduced: {e_reduced:.4} ({:.2}%, ≤ 2% in {:.0}s < 600s)",
                rel_full * 100.0,
                full.elapsed_s,
                rel_reduced * 100.0,
                reduced.elapsed_s
            ),
        ))
    });

    // --- C8: sampler fidelity (minutes; uses the fully trained model) ------
    run_criterion(&mut gate, "C8", "sampler fidelity", |_| {
        // OU stationary variance from the exact linear drift.
        let system = System::Harmonic { n: 1, dim: 1 };
        let batch = 4096;
        let start = initial_positions(&system, batch, 17);
        let mut noise = NoiseSource::new(17, batch);
        let drift = AnalyticDrift::LinearRestoring;
        let warm = rollout_eval(&drift, &system, &start, 0.01, 300, Integrator::Em, &mut noise, false)
            .map_err(|e| e.to_string())?;
        let rec = rollout_eval(
            &drift,
            &system,
            &warm.final_positions,
            0.01,
            500,
            Integrator::Em,
            &mut noise,
            true,
        )
        .map_err(|e| e.to_string())?;
        let frames = rec.positions.as_ref().expect("recorded");
        let mut pooled: Vec<f64> = Vec::with_capacity(batch * frames.len());
        for frame in frames {
            pooled.extend_from_slice(frame.data());
        }
        let m = mean(&pooled);
        let var = fsum(pooled.iter().map(|x| (x - m) * (x - m))) / (pooled.len() as f64 - 1.0);
        let ou_ok = (var - 0.5).abs() <= 0.02;

        // Radial law of the trained hydrogen drift vs 4r²e^{-2r}.
        let model = hydrogen_full_model
            .as_ref()
            .ok_or("hydrogen model unavailable (C1 must run first)")?;
        let system = System::Hydrogen;
        let batch = 2048;
        let start = initial_positions(&system, batch, 19);
        let mut noise = NoiseSource::new(19, batch);
        let warm = rollout_eval(model, &system, &start, 0.01, 400, Integrator::Em, &mut noise, false)
            .map_err(|e| e.to_string())?;
        let rec = rollout_eval(
            model,
            &system,
            &warm.final_positions,
            0.01,
            600,
            Integrator::Em,
            &mut noise,
            true,
        )
        .map_err(|e| e.to_string())?;
        let frames = rec.positions.as_ref().expect("recorded");
        let mut pooled = Vec::new();
        for frame in frames.iter().step_by(6) {
            pooled.extend_from_slice(frame.data());
        }
        let n_cfg = pooled.len() / 3;
        let samples = Array::from_vec(&[n_cfg, 1, 3], pooled).map_err(|e| e.to_string())?;
        let hist = histogram(&samples, Projection::Radius, 0.0, 8.0, 64).map_err(|e| e.to_string())?;
        let tv = tv_distance(&hist, &|r: f64| {
            if r > 0.0 {
                4.0 * r * r * (-2.0 * r).exp()
            } else {
                0.0
            }
        });
        let tv_ok = tv < 0.05;
        Ok((
            ou_ok && tv_ok,
            format!(
                "learned-hydrogen radial TV {tv:.4} (< 0.05 at 64 bins, {n_cfg} samples); OU stationary variance {var:.4} (0.5 ± 0.02)"
            ),
        ))
    });

    // --- summary ------------------------------------------------------------
    let mut out = std::io::stdout();
    if gate.failures.is_empty() {
        let _ = writeln!(out, "=== acceptance gate: all criteria passed ===");
    } else {
        let _ = writeln!(out, "=== acceptance gate: {} failure(s) ===", gate.failures.len());
    }
    drop(out);
    assert!(
        gate.failures.is_empty(),
        "acceptance failures:\n{}",
        gate.failures.join("\n")
    );
}

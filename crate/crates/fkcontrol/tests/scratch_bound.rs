//! Scratch calibration measurements (deleted before ship).

use fkcontrol::potentials::System;
use fkcontrol::sde::{rollout_eval, Integrator, NoiseSource};
use fkcontrol::trainer::initial_positions;
use std::io::Write as IoWrite;

#[test]
fn exact_drift_chain_floors() {
    let mut out = std::io::stdout();
    let system = System::Hydrogen;
    let drift = system.exact_drift().unwrap();
    let batch = 8192;
    let dt = 0.01;
    for integ in [Integrator::Sosra, Integrator::Em] {
        let start = initial_positions(&system, batch, 101);
        let mut noise = NoiseSource::new(101, batch);
        let warm = rollout_eval(&drift, &system, &start, dt, 2000, integ, &mut noise, false)
            .expect("warm");
        let mut pos = warm.final_positions;
        for slice in 0..2 {
            let span = rollout_eval(&drift, &system, &pos, dt, 6000, integ, &mut noise, false)
                .expect("span");
            let e = span.energy(dt, 6000);
            let se = span.energy_stderr(dt, 6000);
            let _ = writeln!(
                out,
                "{integ:?} slice {slice}: energy {e:.5} +- {se:.5} (guard {g})",
                g = span.guard_events
            );
            pos = span.final_positions;
        }
    }
}

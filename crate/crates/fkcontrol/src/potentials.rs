//! System definitions: potential energies, analytic reference drifts, and
//! reference ground-state energies.
//!
//! Positions are `(B, N, d)` arrays — batch, particle, coordinate — in
//! Hartree-like units where the Hamiltonian is `-½∇² + V`. Coulomb terms are
//! *not* softened; singular configurations raise domain errors and the SDE
//! integrator keeps trajectories away from them with its proximity guard.
//!
//! Every potential is recorded through tape primitives, so the same
//! definition serves plain evaluation, backprop through rollouts, and the
//! position derivatives used by the diagnostics module. Pairwise terms pool
//! with correctly rounded sums, making each potential exactly symmetric under
//! particle exchange (bit for bit), and singular pair denominators are made
//! safe on the self-pair diagonal (which is then excluded from pooling).

use crate::diffcore::{Array, Tape, ValueId};
use crate::{Error, Result};

/// A quantum system the solver can target.
#[derive(Clone, Debug, PartialEq)]
pub enum System {
    /// One electron, one proton at the origin: V = -1/|r|.
    Hydrogen,
    /// Two electrons, charge-2 nucleus at the origin:
    /// V = -2/|r₁| - 2/|r₂| + 1/|r₁-r₂|.
    Helium,
    /// Two electrons, two protons fixed at ±(R/2)·ẑ; V includes the
    /// proton-proton repulsion 1/R so the loss estimates the total energy.
    H2 { bond_length: f64 },
    /// `n` independent particles in an isotropic harmonic trap in `dim`
    /// dimensions: V = ½ Σ|rᵢ|².
    Harmonic { n: usize, dim: usize },
    /// `n` bosons in a 2-D harmonic trap with a repulsive Gaussian pair
    /// interaction: V = ½Σ|rᵢ|² + Σ_{i<j} g/(π s²) · exp(-|rᵢ-rⱼ|²/s²).
    Bosons { n: usize, g: f64, s: f64 },
    /// Calogero–Sutherland model: `n` particles on a line in a harmonic trap
    /// with inverse-square repulsion,
    /// V = ½Σxᵢ² + λ(λ-1)/2 · Σ_{i≠j} 1/(xᵢ-xⱼ)².
    Calogero { n: usize, lambda: f64 },
}

/// Fixed point charges of a system: (position, charge). Empty for systems
/// without Coulomb nuclei.
pub type Nuclei = Vec<(Vec<f64>, f64)>;

impl System {
    pub fn n_particles(&self) -> usize {
        match self {
            System::Hydrogen => 1,
            System::Helium | System::H2 { .. } => 2,
            System::Harmonic { n, .. } | System::Bosons { n, .. } | System::Calogero { n, .. } => {
                *n
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            System::Hydrogen | System::Helium | System::H2 { .. } => 3,
            System::Harmonic { dim, .. } => *dim,
            System::Bosons { .. } => 2,
            System::Calogero { .. } => 1,
        }
    }

    /// Short machine name used in configs and manifests.
    pub fn name(&self) -> &'static str {
        match self {
            System::Hydrogen => "hydrogen",
            System::Helium => "helium",
            System::H2 { .. } => "h2",
            System::Harmonic { .. } => "harmonic",
            System::Bosons { .. } => "bosons",
            System::Calogero { .. } => "calogero",
        }
    }

    /// Human-readable descriptor including parameters.
    pub fn describe(&self) -> String {
        match self {
            System::Hydrogen => "hydrogen".into(),
            System::Helium => "helium".into(),
            System::H2 { bond_length } => format!("h2 bond_length={bond_length}"),
            System::Harmonic { n, dim } => format!("harmonic n={n} dim={dim}"),
            System::Bosons { n, g, s } => format!("bosons n={n} g={g} s={s}"),
            System::Calogero { n, lambda } => format!("calogero n={n} lambda={lambda}"),
        }
    }

    /// Validate internal parameters (particle counts, couplings).
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            System::Hydrogen | System::Helium => Ok(()),
            System::H2 { bond_length } => {
                if *bond_length > 0.0 {
                    Ok(())
                } else {
                    bad(format!("h2 bond_length must be positive, got {bond_length}"))
                }
            }
            System::Harmonic { n, dim } => {
                if *n == 0 || *dim == 0 {
                    bad(format!("harmonic needs n >= 1 and dim >= 1, got n={n} dim={dim}"))
                } else {
                    Ok(())
                }
            }
            System::Bosons { n, g, s } => {
                if *n == 0 {
                    bad("bosons needs n >= 1".into())
                } else if *g < 0.0 {
                    bad(format!("bosons coupling g must be >= 0, got {g}"))
                } else if *s <= 0.0 {
                    bad(format!("bosons interaction range s must be positive, got {s}"))
                } else {
                    Ok(())
                }
            }
            System::Calogero { n, lambda } => {
                if *n == 0 {
                    bad("calogero needs n >= 1".into())
                } else if *lambda < 1.0 {
                    // λ < 1 makes the inverse-square coupling attractive or
                    // the drift non-confining near coincidence.
                    bad(format!("calogero requires lambda >= 1, got {lambda}"))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Fixed nuclei (position, charge), for Coulomb systems.
    pub fn nuclei(&self) -> Nuclei {
        match self {
            System::Hydrogen => vec![(vec![0.0, 0.0, 0.0], 1.0)],
            System::Helium => vec![(vec![0.0, 0.0, 0.0], 2.0)],
            System::H2 { bond_length } => vec![
                (vec![0.0, 0.0, bond_length / 2.0], 1.0),
                (vec![0.0, 0.0, -bond_length / 2.0], 1.0),
            ],
            _ => Vec::new(),
        }
    }

    /// Whether the potential diverges when two particles coincide.
    pub fn pair_singular(&self) -> bool {
        matches!(
            self,
            System::Helium | System::H2 { .. } | System::Calogero { .. }
        )
    }

    /// Known ground-state energy: exact where available, otherwise an
    /// accepted numerical reference. `None` when no reference is tabulated
    /// (e.g. interacting bosons, H₂ at arbitrary bond length).
    pub fn reference_energy(&self) -> Option<f64> {
        match self {
            System::Hydrogen => Some(-0.5),
            System::Helium => Some(-2.903),
            System::H2 { bond_length } => {
                if (bond_length - 1.401).abs() < 1e-9 {
                    Some(-1.173)
                } else if (bond_length - 2.8).abs() < 1e-9 {
                    Some(-1.071)
                } else {
                    None
                }
            }
            System::Harmonic { n, dim } => Some(0.5 * (*n as f64) * (*dim as f64)),
            System::Bosons { n, g, .. } => {
                if *g == 0.0 {
                    Some(*n as f64) // d/2 = 1 per particle in 2-D
                } else {
                    None
                }
            }
            System::Calogero { n, lambda } => {
                let nf = *n as f64;
                Some(nf / 2.0 + lambda * nf * (nf - 1.0) / 2.0)
            }
        }
    }

    /// Analytic ground-state drift ∇ln ψ₀ where known in closed form.
    pub fn exact_drift(&self) -> Option<AnalyticDrift> {
        match self {
            System::Hydrogen => Some(AnalyticDrift::HydrogenCoulomb),
            System::Harmonic { .. } => Some(AnalyticDrift::LinearRestoring),
            System::Bosons { g, .. } if *g == 0.0 => Some(AnalyticDrift::LinearRestoring),
            System::Calogero { lambda, .. } => {
                Some(AnalyticDrift::CalogeroSutherland { lambda: *lambda })
            }
            _ => None,
        }
    }

    fn check_positions(&self, tape: &Tape, pos: ValueId) -> Result<()> {
        let shape = tape.value(pos).shape();
        if shape.len() != 3 || shape[1] != self.n_particles() || shape[2] != self.dim() {
            return Err(Error::Dimension(format!(
                "{} expects positions (B, {}, {}), got {:?}",
                self.name(),
                self.n_particles(),
                self.dim(),
                shape
            )));
        }
        Ok(())
    }

    /// Record the potential on the tape: positions `(B, N, d)` → `(B,)`.
    /// Evaluating at a singular configuration is a domain error.
    pub fn potential(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        self.check_positions(tape, pos)?;
        match self {
            System::Hydrogen | System::Helium | System::H2 { .. } => {
                let mut terms: Vec<ValueId> = Vec::new();
                // Electron–nucleus attraction, one term per nucleus.
                for (site, charge) in self.nuclei() {
                    let shifted_row: Vec<f64> = site.iter().map(|v| -v).collect();
                    let shifted = tape.add_row_const(pos, &shifted_row)?;
                    let dist = norms_last(tape, shifted)?; // (B, N)
                    let inv = tape.reciprocal(dist)?;
                    let summed = tape.sum_axis(inv, 1)?; // (B,)
                    terms.push(tape.scale(summed, -charge)?);
                }
                // Electron–electron repulsion for two-electron systems.
                if self.n_particles() > 1 {
                    terms.push(pair_inverse_distance_sum(tape, pos, 1.0)?);
                }
                let mut v = tape.add_many(&terms)?;
                // Fixed nucleus–nucleus repulsion enters as a constant shift.
                if let System::H2 { bond_length } = self {
                    v = tape.add_scalar(v, 1.0 / bond_length)?;
                }
                Ok(v)
            }
            System::Harmonic { .. } => trap_energy(tape, pos),
            System::Bosons { n, g, s } => {
                let trap = trap_energy(tape, pos)?;
                if *g == 0.0 || *n < 2 {
                    return Ok(trap);
                }
                // Σ_{i<j} g/(π s²) exp(-|Δ|²/s²), via ordered pairs halved.
                let diffs = tape.pair_diff(pos)?;
                let sq = tape.square(diffs)?;
                let d2 = tape.sum_axis(sq, 3)?; // (B, N, N)
                let scaled = tape.scale(d2, -1.0 / (s * s))?;
                let gauss = tape.exp(scaled)?;
                let lifted = tape.reshape(gauss, &[shape3(tape, pos, 0), *n, *n, 1])?;
                let pooled = tape.pool_pairs(lifted, true)?; // (B, N, 1)
                let per_b = tape.sum_axis(pooled, 1)?; // (B, 1)
                let flat = tape.reshape(per_b, &[shape3(tape, pos, 0)])?;
                let interaction = tape.scale(flat, 0.5 * g / (std::f64::consts::PI * s * s))?;
                tape.add(trap, interaction)
            }
            System::Calogero { n, lambda } => {
                let trap = trap_energy(tape, pos)?;
                if *n < 2 {
                    return Ok(trap);
                }
                let coupling = lambda * (lambda - 1.0);
                if coupling == 0.0 {
                    return Ok(trap); // λ = 1: free fermion point, no pair term
                }
                let diffs = tape.pair_diff(pos)?;
                let sq = tape.square(diffs)?;
                let d2 = tape.sum_axis(sq, 3)?; // (B, N, N), zero diagonal
                let safe = tape.add_diag_const(d2, 1.0)?;
                let inv = tape.reciprocal(safe)?;
                let lifted = tape.reshape(inv, &[shape3(tape, pos, 0), *n, *n, 1])?;
                let pooled = tape.pool_pairs(lifted, true)?;
                let per_b = tape.sum_axis(pooled, 1)?;
                let flat = tape.reshape(per_b, &[shape3(tape, pos, 0)])?;
                let interaction = tape.scale(flat, 0.5 * coupling)?;
                tape.add(trap, interaction)
            }
        }
    }

    /// Potential of a single configuration (flat `N·d` coordinates).
    pub fn potential_at(&self, config: &[f64]) -> Result<f64> {
        let (n, d) = (self.n_particles(), self.dim());
        if config.len() != n * d {
            return Err(Error::Dimension(format!(
                "{} expects {} coordinates, got {}",
                self.name(),
                n * d,
                config.len()
            )));
        }
        let mut tape = Tape::new();
        let pos = tape.leaf(Array::from_vec(&[1, n, d], config.to_vec())?);
        let v = self.potential(&mut tape, pos)?;
        tape.value(v).scalar_value()
    }
}

fn shape3(tape: &Tape, pos: ValueId, axis: usize) -> usize {
    tape.value(pos).shape()[axis]
}

/// ½ Σ_i |r_i|² per batch element: (B, N, d) → (B,).
fn trap_energy(tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
    let sq = tape.square(pos)?;
    let per_particle = tape.sum_axis(sq, 2)?;
    let per_b = tape.sum_axis(per_particle, 1)?;
    tape.scale(per_b, 0.5)
}

/// Euclidean norms over the last axis: (..., d) → (...).
fn norms_last(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let rank = tape.value(x).rank();
    let sq = tape.square(x)?;
    let d2 = tape.sum_axis(sq, rank - 1)?;
    tape.sqrt(d2)
}

/// coeff · Σ_{i<j} 1/|r_i - r_j| per batch element, via ordered pairs halved.
/// The self-pair diagonal is lifted to distance 1 before inversion and then
/// excluded from pooling, so it never divides by zero.
fn pair_inverse_distance_sum(tape: &mut Tape, pos: ValueId, coeff: f64) -> Result<ValueId> {
    let shape = tape.value(pos).shape().to_vec();
    let (b, n) = (shape[0], shape[1]);
    let diffs = tape.pair_diff(pos)?;
    let sq = tape.square(diffs)?;
    let d2 = tape.sum_axis(sq, 3)?;
    let safe = tape.add_diag_const(d2, 1.0)?;
    let dist = tape.sqrt(safe)?;
    let inv = tape.reciprocal(dist)?;
    let lifted = tape.reshape(inv, &[b, n, n, 1])?;
    let pooled = tape.pool_pairs(lifted, true)?;
    let per_b = tape.sum_axis(pooled, 1)?;
    let flat = tape.reshape(per_b, &[b])?;
    tape.scale(flat, 0.5 * coeff)
}

/// Closed-form drift fields `v = ∇ln ψ₀` for analytically solvable cases.
/// These use exact inverse distances (no regularisation): they are only ever
/// evaluated away from singular configurations, where they are exact.
#[derive(Clone, Debug, PartialEq)]
pub enum AnalyticDrift {
    /// v(r) = -r/|r| (hydrogen ground state, N=1, d=3).
    HydrogenCoulomb,
    /// v(x) = -x (harmonic traps, any N and d).
    LinearRestoring,
    /// 1-D: v_i = -x_i + λ Σ_{j≠i} 1/(x_i - x_j).
    CalogeroSutherland { lambda: f64 },
    /// 2-D: v_i = -r_i + λ Σ_{j≠i} (r_i - r_j)/|r_i - r_j|². Not a ground
    /// state of the boson trap — used as a trial drift whose cost upper-bounds
    /// interacting energies while vanishing at particle coincidence.
    PlanarLogGas { lambda: f64 },
}

impl AnalyticDrift {
    /// Record the drift on the tape: (B, N, d) → (B, N, d).
    pub fn forward(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        let shape = tape.value(pos).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Dimension(format!(
                "drift expects positions (B, N, d), got {:?}",
                shape
            )));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        match self {
            AnalyticDrift::HydrogenCoulomb => {
                if n != 1 || d != 3 {
                    return Err(Error::Dimension(format!(
                        "hydrogen drift expects (B, 1, 3), got {:?}",
                        shape
                    )));
                }
                let dist = norms_last(tape, pos)?; // (B, 1)
                let inv = tape.reciprocal(dist)?;
                let unit = tape.scale_rows(pos, inv)?;
                tape.scale(unit, -1.0)
            }
            AnalyticDrift::LinearRestoring => tape.neg(pos),
            AnalyticDrift::CalogeroSutherland { lambda } => {
                if d != 1 {
                    return Err(Error::Dimension(format!(
                        "Calogero–Sutherland drift is one-dimensional, got {:?}",
                        shape
                    )));
                }
                let restoring = tape.neg(pos)?;
                if n < 2 {
                    return Ok(restoring);
                }
                let diffs = tape.pair_diff(pos)?; // (B, N, N, 1)
                let safe = tape.add_diag_const(diffs, 1.0)?;
                let inv = tape.reciprocal(safe)?;
                let pooled = tape.pool_pairs(inv, true)?; // (B, N, 1)
                let scaled = tape.scale(pooled, *lambda)?;
                tape.add(restoring, scaled)
            }
            AnalyticDrift::PlanarLogGas { lambda } => {
                if d != 2 {
                    return Err(Error::Dimension(format!(
                        "planar log-gas drift is two-dimensional, got {:?}",
                        shape
                    )));
                }
                let restoring = tape.neg(pos)?;
                if n < 2 {
                    return Ok(restoring);
                }
                let diffs = tape.pair_diff(pos)?; // (B, N, N, 2)
                let sq = tape.square(diffs)?;
                let d2 = tape.sum_axis(sq, 3)?; // (B, N, N)
                let safe = tape.add_diag_const(d2, 1.0)?;
                let inv = tape.reciprocal(safe)?;
                let weighted = tape.scale_rows(diffs, inv)?;
                let pooled = tape.pool_pairs(weighted, true)?;
                let scaled = tape.scale(pooled, *lambda)?;
                tape.add(restoring, scaled)
            }
        }
        .and_then(|v| {
            debug_assert_eq!(tape.value(v).shape(), &[b, n, d]);
            Ok(v)
        })
    }

    /// Evaluate at a single configuration (flat `N·d` coordinates).
    pub fn at(&self, n: usize, d: usize, config: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pos = tape.leaf(Array::from_vec(&[1, n, d], config.to_vec())?);
        let v = self.forward(&mut tape, pos)?;
        Ok(tape.value(v).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hydrogen_potential_at_unit_distance() {
        let v = System::Hydrogen.potential_at(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v, -1.0);
    }

    #[test]
    fn helium_potential_mirrored_electrons() {
        // Electrons at ±x̂: V = -2 - 2 + 1/2 = -3.5 exactly.
        let v = System::Helium
            .potential_at(&[1.0, 0.0, 0.0, -1.0, 0.0, 0.0])
            .unwrap();
        assert_eq!(v, -3.5);
    }

    #[test]
    fn h2_potential_hand_value() {
        // R=2 (nuclei at ±ẑ), electrons at (0,0,±0.5):
        // each electron: -1/0.5 - 1/1.5; ee: +1/1; nn: +1/2 → total -23/6.
        let v = System::H2 { bond_length: 2.0 }
            .potential_at(&[0.0, 0.0, 0.5, 0.0, 0.0, -0.5])
            .unwrap();
        assert!((v - (-23.0 / 6.0)).abs() < 1e-12, "got {v}");
    }

    #[test]
    fn harmonic_potential_is_half_square() {
        let sys = System::Harmonic { n: 1, dim: 1 };
        assert_eq!(sys.potential_at(&[2.0]).unwrap(), 2.0);
        let sys3 = System::Harmonic { n: 2, dim: 3 };
        let v = sys3.potential_at(&[1.0, 0.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        assert_eq!(v, 2.5);
    }

    #[test]
    fn boson_contact_value_at_coincidence() {
        // Both particles at the origin: trap term 0, interaction
        // g/(π s²)·exp(0) = 60/π for g=15, s=0.5.
        let sys = System::Bosons {
            n: 2,
            g: 15.0,
            s: 0.5,
        };
        let v = sys.potential_at(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        let expected = 60.0 / std::f64::consts::PI; // ≈ 19.0986
        assert!((v - expected).abs() < 1e-12, "got {v}, want {expected}");
    }

    #[test]
    fn boson_zero_coupling_drops_interaction() {
        let sys = System::Bosons {
            n: 3,
            g: 0.0,
            s: 0.5,
        };
        let coords = [0.1, 0.2, -0.3, 0.4, 0.0, -0.1];
        let trap_only = System::Harmonic { n: 3, dim: 2 }.potential_at(&coords).unwrap();
        assert_eq!(sys.potential_at(&coords).unwrap(), trap_only);
    }

    #[test]
    fn calogero_potential_hand_value() {
        // N=2, λ=2, x = (1, -1): ½·2 + (λ(λ-1)/2)·(2/4) = 1 + 0.5.
        let sys = System::Calogero { n: 2, lambda: 2.0 };
        let v = sys.potential_at(&[1.0, -1.0]).unwrap();
        assert!((v - 1.5).abs() < 1e-14, "got {v}");
    }

    #[test]
    fn coulomb_potentials_error_at_singular_points() {
        assert!(matches!(
            System::Hydrogen.potential_at(&[0.0, 0.0, 0.0]),
            Err(Error::Domain(_))
        ));
        // Coincident electrons in helium.
        assert!(matches!(
            System::Helium.potential_at(&[0.5, 0.0, 0.0, 0.5, 0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn wrong_coordinate_count_is_dimension_error() {
        assert!(matches!(
            System::Helium.potential_at(&[0.0; 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn potentials_are_bitwise_permutation_symmetric() {
        let sys = System::Bosons {
            n: 3,
            g: 2.0,
            s: 0.5,
        };
        let a = [0.3, -0.2, 1.1, 0.7, -0.8, 0.25];
        // Swap particles 0 and 2.
        let b = [-0.8, 0.25, 1.1, 0.7, 0.3, -0.2];
        let va = sys.potential_at(&a).unwrap();
        let vb = sys.potential_at(&b).unwrap();
        assert_eq!(va.to_bits(), vb.to_bits());

        let he = System::Helium;
        let a = [0.4, -0.3, 0.8, -1.0, 0.2, 0.5];
        let b = [-1.0, 0.2, 0.5, 0.4, -0.3, 0.8];
        assert_eq!(
            he.potential_at(&a).unwrap().to_bits(),
            he.potential_at(&b).unwrap().to_bits()
        );
    }

    #[test]
    fn hydrogen_drift_is_inward_unit_vector() {
        let v = AnalyticDrift::HydrogenCoulomb
            .at(1, 3, &[0.0, 0.0, 2.0])
            .unwrap();
        assert_eq!(v, vec![0.0, 0.0, -1.0]);
    }

    #[test]
    fn linear_restoring_drift_is_minus_x() {
        let v = AnalyticDrift::LinearRestoring
            .at(2, 2, &[0.5, -1.5, 2.0, 0.25])
            .unwrap();
        assert_eq!(v, vec![-0.5, 1.5, -2.0, -0.25]);
    }

    #[test]
    fn calogero_drift_hand_value() {
        // N=2, λ=1, x=(1,-1): v₁ = -1 + 1/2 = -0.5, v₂ = +0.5.
        let v = AnalyticDrift::CalogeroSutherland { lambda: 1.0 }
            .at(2, 1, &[1.0, -1.0])
            .unwrap();
        assert_eq!(v, vec![-0.5, 0.5]);
    }

    #[test]
    fn planar_log_gas_drift_hand_value() {
        // Two particles at ±x̂: Δ = (2,0), |Δ|² = 4; v₁ = -(1,0) + λ(2,0)/4.
        let v = AnalyticDrift::PlanarLogGas { lambda: 2.0 }
            .at(2, 2, &[1.0, 0.0, -1.0, 0.0])
            .unwrap();
        assert_eq!(v, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn reference_energies_match_known_values() {
        assert_eq!(System::Hydrogen.reference_energy(), Some(-0.5));
        assert_eq!(System::Helium.reference_energy(), Some(-2.903));
        assert_eq!(
            System::H2 { bond_length: 1.401 }.reference_energy(),
            Some(-1.173)
        );
        assert_eq!(
            System::H2 { bond_length: 2.8 }.reference_energy(),
            Some(-1.071)
        );
        assert_eq!(System::H2 { bond_length: 1.9 }.reference_energy(), None);
        assert_eq!(
            System::Harmonic { n: 2, dim: 3 }.reference_energy(),
            Some(3.0)
        );
        assert_eq!(
            System::Bosons { n: 4, g: 0.0, s: 0.5 }.reference_energy(),
            Some(4.0)
        );
        assert_eq!(
            System::Bosons { n: 2, g: 1.0, s: 0.5 }.reference_energy(),
            None
        );
    }

    /// Independent oracle for the Calogero–Sutherland reference energy: with
    /// the exact drift, ½(∇·v + |v|²) + E₀ must equal V pointwise. Here the
    /// divergence is computed by plain central finite differences, entirely
    /// outside the tape machinery, and E₀ is recovered as V - ½(∇·v + |v|²).
    #[test]
    fn calogero_reference_energy_matches_fd_oracle() {
        let (n, lam) = (5usize, 2.0f64);
        let sys = System::Calogero { n, lambda: lam };
        let drift = sys.exact_drift().unwrap();
        let x: Vec<f64> = vec![-1.9, -0.7, 0.15, 0.9, 2.1];
        let h = 1e-5;
        let mut div = 0.0;
        for k in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let vp = drift.at(n, 1, &xp).unwrap()[k];
            let vm = drift.at(n, 1, &xm).unwrap()[k];
            div += (vp - vm) / (2.0 * h);
        }
        let v = drift.at(n, 1, &x).unwrap();
        let v2: f64 = v.iter().map(|a| a * a).sum();
        let vu = 0.5 * (div + v2);
        let e0 = sys.potential_at(&x).unwrap() - vu;
        let expected = 5.0 / 2.0 + 2.0 * 5.0 * 4.0 / 2.0; // 22.5
        assert_eq!(sys.reference_energy(), Some(expected));
        assert!(
            (e0 - expected).abs() < 1e-5,
            "fd oracle gives {e0}, formula {expected}"
        );
    }

    #[test]
    fn unsupported_or_invalid_parameters_are_config_errors() {
        assert!(System::Calogero { n: 3, lambda: 0.5 }.validate().is_err());
        assert!(System::Bosons { n: 2, g: -1.0, s: 0.5 }.validate().is_err());
        assert!(System::Bosons { n: 2, g: 1.0, s: 0.0 }.validate().is_err());
        assert!(System::H2 { bond_length: 0.0 }.validate().is_err());
        assert!(System::Harmonic { n: 0, dim: 3 }.validate().is_err());
        assert!(System::Helium.validate().is_ok());
    }

    #[test]
    fn exact_drift_availability() {
        assert!(System::Hydrogen.exact_drift().is_some());
        assert!(System::Helium.exact_drift().is_none());
        assert!(System::H2 { bond_length: 1.401 }.exact_drift().is_none());
        assert!(System::Bosons { n: 2, g: 0.0, s: 0.5 }.exact_drift().is_some());
        assert!(System::Bosons { n: 2, g: 1.0, s: 0.5 }.exact_drift().is_none());
    }
}

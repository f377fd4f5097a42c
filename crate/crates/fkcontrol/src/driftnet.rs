//! Drift networks: permutation-equivariant architectures with physics-aware
//! skip connections.
//!
//! A drift model maps positions `(B, N, d)` to a drift field of the same
//! shape. Readout layers are zero-initialised, so a fresh model's output
//! equals its skip connection exactly: training starts from a well-defined
//! reference process (e.g. an Ornstein–Uhlenbeck relaxation for the linear
//! skip, or a wavefunction-cusp ansatz for Coulomb systems) instead of an
//! arbitrary random field.
//!
//! Equivariance is exact at the bit level: particle pooling uses correctly
//! rounded sums and all per-particle/per-pair transforms act row-wise, so
//! permuting input particles permutes the output rows without changing a
//! single bit. Tests assert this over entire permutation groups.

use crate::diffcore::{Array, Tape, ValueId};
use crate::potentials::{Nuclei, System};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

/// Offset added to distances before inversion when forming unit vectors in
/// skip connections, so exact coincidences contribute zero instead of NaN.
pub const UNIT_EPS: f64 = 1e-12;

/// RNG stream dedicated to parameter initialisation (noise streams use the
/// batch-element index; keeping init far away avoids any overlap).
const INIT_STREAM: u64 = 0xFFFF_FFFF_0000_0002;

/// Network family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Per-particle and per-pair streams with pooled messages: the default,
    /// equivariant, pair-aware architecture.
    PairDrift,
    /// Classic pooled set network: per-particle stream only.
    DeepSets,
    /// Plain MLP on flattened coordinates (not equivariant); baseline.
    Mlp,
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::PairDrift => "pairdrift",
            Arch::DeepSets => "deepsets",
            Arch::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "pairdrift" => Ok(Arch::PairDrift),
            "deepsets" => Ok(Arch::DeepSets),
            "mlp" => Ok(Arch::Mlp),
            _ => Err(Error::Config(format!(
                "unknown arch '{s}' (valid: pairdrift, deepsets, mlp)"
            ))),
        }
    }
}

/// Additive skip connection applied after the network body.
#[derive(Clone, Debug, PartialEq)]
pub enum SkipSpec {
    None,
    /// v += r·Wᵀ with a fixed d×d matrix (row-major). The default `-I` makes
    /// the initial process an Ornstein–Uhlenbeck relaxation toward the origin.
    Linear(Vec<f64>),
    /// Wavefunction-cusp drift for Coulomb systems: for each nucleus k with
    /// charge Z at R_k, v_i += -Z · unit(r_i - R_k); for each other particle,
    /// v_i += pair_coeff · unit(r_i - r_j) (repulsive, pair_coeff = ½ for
    /// electron pairs). Unit vectors are regularised by [`UNIT_EPS`].
    Cusp { nuclei: Nuclei, pair_coeff: f64 },
}

impl SkipSpec {
    /// The default linear skip: -identity in `d` dimensions.
    pub fn restoring(d: usize) -> SkipSpec {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = -1.0;
        }
        SkipSpec::Linear(m)
    }

    /// Cusp skip derived from a system's nuclei. Errors for systems without
    /// Coulomb structure.
    pub fn cusp_for(system: &System) -> Result<SkipSpec> {
        let nuclei = system.nuclei();
        if nuclei.is_empty() {
            return Err(Error::Config(format!(
                "cusp skip requires a system with Coulomb nuclei, got {}",
                system.name()
            )));
        }
        Ok(SkipSpec::Cusp {
            nuclei,
            pair_coeff: 0.5,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SkipSpec::None => "none",
            SkipSpec::Linear(_) => "linear",
            SkipSpec::Cusp { .. } => "cusp",
        }
    }
}

/// Complete architectural description of a drift model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n: usize,
    pub dim: usize,
    pub width: usize,
    /// Number of hidden blocks between the embedding and the readout.
    pub depth: usize,
    /// Include the self-pair (j == i) in pooled pair sums. The self-pair
    /// carries a constant feature (zero displacement), acting as an extra
    /// per-particle bias path.
    pub self_pairs: bool,
    /// Feed symmetric second-order displacement features (the entries of
    /// Δ·Δᵀ) into the per-pair stream alongside Δ itself.
    pub pair_matrix_features: bool,
    pub skip: SkipSpec,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::Config(format!(
                "model needs n >= 1 and dim >= 1, got n={} dim={}",
                self.n, self.dim
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("model width must be >= 1".into()));
        }
        if let SkipSpec::Linear(m) = &self.skip {
            if m.len() != self.dim * self.dim {
                return Err(Error::Config(format!(
                    "linear skip matrix must have {} entries, got {}",
                    self.dim * self.dim,
                    m.len()
                )));
            }
        }
        if let SkipSpec::Cusp { nuclei, .. } = &self.skip {
            for (site, _) in nuclei {
                if site.len() != self.dim {
                    return Err(Error::Config(format!(
                        "cusp nucleus has {} coordinates, model dim is {}",
                        site.len(),
                        self.dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Parameter names and shapes in their canonical (storage) order.
    pub fn parameter_plan(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h, nd) = (self.dim, self.width, self.n * self.dim);
        let mut plan: Vec<(String, Vec<usize>)> = Vec::new();
        match self.arch {
            Arch::PairDrift => {
                plan.push(("embed.single.w".into(), vec![d, h]));
                plan.push(("embed.pool.w".into(), vec![d, h]));
                plan.push(("embed.bias".into(), vec![h]));
                plan.push(("embed.pair.w".into(), vec![d, h]));
                if self.pair_matrix_features {
                    plan.push(("embed.pair_sq.w".into(), vec![d, h]));
                    let crosses = d * (d - 1) / 2;
                    if crosses > 0 {
                        plan.push(("embed.pair_cross.w".into(), vec![crosses, h]));
                    }
                }
                plan.push(("embed.pair.bias".into(), vec![h]));
                for k in 0..self.depth {
                    plan.push((format!("block{k}.single.w"), vec![h, h]));
                    plan.push((format!("block{k}.pool.w"), vec![h, h]));
                    plan.push((format!("block{k}.bias"), vec![h]));
                    plan.push((format!("block{k}.pair.w"), vec![h, h]));
                    plan.push((format!("block{k}.pair.bias"), vec![h]));
                }
                plan.push(("readout.single.w".into(), vec![h, d]));
                plan.push(("readout.pool.w".into(), vec![h, d]));
                plan.push(("readout.bias".into(), vec![d]));
            }
            Arch::DeepSets => {
                let mut fin = d;
                for k in 0..self.depth.max(1) {
                    plan.push((format!("block{k}.self.w"), vec![fin, h]));
                    plan.push((format!("block{k}.pool.w"), vec![fin, h]));
                    plan.push((format!("block{k}.bias"), vec![h]));
                    fin = h;
                }
                plan.push(("readout.w".into(), vec![h, d]));
                plan.push(("readout.bias".into(), vec![d]));
            }
            Arch::Mlp => {
                let mut fin = nd;
                for k in 0..self.depth.max(1) {
                    plan.push((format!("layer{k}.w"), vec![fin, h]));
                    plan.push((format!("layer{k}.bias"), vec![h]));
                    fin = h;
                }
                plan.push(("readout.w".into(), vec![h, nd]));
                plan.push(("readout.bias".into(), vec![nd]));
            }
        }
        plan
    }
}

/// A named parameter tensor.
#[derive(Clone, Debug)]
pub struct NamedParam {
    pub name: String,
    pub value: Array,
}

/// A drift network with its parameters.
#[derive(Clone, Debug)]
pub struct DriftModel {
    pub config: ModelConfig,
    pub params: Vec<NamedParam>,
}

impl DriftModel {
    /// Initialise: interior weights from a scaled uniform distribution
    /// U(-√(1/fan_in), √(1/fan_in)), biases and readout weights exactly zero
    /// (so the initial drift equals the skip connection). Deterministic in
    /// `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<DriftModel> {
        config.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut params = Vec::new();
        for (name, shape) in config.parameter_plan() {
            let n_el: usize = shape.iter().product();
            let value = if name.starts_with("readout.") || name.ends_with(".bias") {
                Array::zeros(&shape)
            } else {
                let fan_in = shape[0] as f64;
                let bound = (1.0 / fan_in).sqrt();
                let data: Vec<f64> = (0..n_el)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                Array::from_vec(&shape, data)?
            };
            params.push(NamedParam { name, value });
        }
        Ok(DriftModel { config, params })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Array> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Put the parameters onto a tape — as trainable parameters when `trainable`
    /// (their gradients appear in `Tape::param_gradients` in `self.params`
    /// order), otherwise as constants.
    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> Bound<'m> {
        let mut by_name = HashMap::new();
        for p in &self.params {
            let id = if trainable {
                tape.param(p.value.clone())
            } else {
                tape.leaf(p.value.clone())
            };
            by_name.insert(p.name.clone(), id);
        }
        Bound {
            model: self,
            by_name,
        }
    }

    /// One-shot evaluation on a throwaway tape: positions → drift values.
    pub fn forward_values(&self, positions: &Array) -> Result<Array> {
        let mut tape = Tape::new();
        let pos = tape.leaf(positions.clone());
        let bound = self.bind(&mut tape, false);
        let v = bound.forward(&mut tape, pos)?;
        Ok(tape.value(v).clone())
    }

    /// Write model (architecture + parameters) to a checkpoint file: a plain
    /// text header followed by a `binary` marker and the raw little-endian
    /// f64 parameter data in canonical order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = String::new();
        header.push_str("driftmodel v1\n");
        let c = &self.config;
        header.push_str(&format!("arch {}\n", c.arch.name()));
        header.push_str(&format!("n {}\n", c.n));
        header.push_str(&format!("dim {}\n", c.dim));
        header.push_str(&format!("width {}\n", c.width));
        header.push_str(&format!("depth {}\n", c.depth));
        header.push_str(&format!("self_pairs {}\n", c.self_pairs));
        header.push_str(&format!("pair_matrix_features {}\n", c.pair_matrix_features));
        match &c.skip {
            SkipSpec::None => header.push_str("skip none\n"),
            SkipSpec::Linear(m) => {
                header.push_str("skip linear\n");
                let entries: Vec<String> = m.iter().map(|v| format!("{v}")).collect();
                header.push_str(&format!("skip_matrix {}\n", entries.join(" ")));
            }
            SkipSpec::Cusp { nuclei, pair_coeff } => {
                header.push_str("skip cusp\n");
                for (site, charge) in nuclei {
                    let coords: Vec<String> = site.iter().map(|v| format!("{v}")).collect();
                    header.push_str(&format!("nucleus {} {charge}\n", coords.join(" ")));
                }
                header.push_str(&format!("pair_coeff {pair_coeff}\n"));
            }
        }
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("param {} {}\n", p.name, dims.join(" ")));
        }
        header.push_str("binary\n");

        let mut bytes: Vec<u8> = header.into_bytes();
        for p in &self.params {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(Error::io(format!("writing checkpoint {}", path.display())))?;
        std::fs::rename(&tmp, path)
            .map_err(Error::io(format!("finalising checkpoint {}", path.display())))?;
        Ok(())
    }

    /// Read a checkpoint written by [`DriftModel::save`]. The stored
    /// architecture must be self-consistent; shape mismatches between the
    /// declared plan and the stored parameter list are reported explicitly.
    pub fn load(path: &Path) -> Result<DriftModel> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(Error::io(format!("reading checkpoint {}", path.display())))?;
        // Split header from binary payload at the `binary\n` marker.
        let marker = b"\nbinary\n";
        let marker_pos = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Checkpoint("missing binary marker".into()))?;
        let header = std::str::from_utf8(&bytes[..marker_pos + 1])
            .map_err(|_| Error::Checkpoint("header is not valid UTF-8".into()))?;
        let payload = &bytes[marker_pos + marker.len()..];

        let mut lines = header.lines();
        if lines.next() != Some("driftmodel v1") {
            return Err(Error::Checkpoint(
                "not a drift model checkpoint (bad magic line)".into(),
            ));
        }
        let mut fields: HashMap<&str, String> = HashMap::new();
        let mut nuclei: Nuclei = Vec::new();
        let mut declared: Vec<(String, Vec<usize>)> = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let Some(key) = parts.next() else { continue };
            let rest: Vec<&str> = parts.collect();
            match key {
                "param" => {
                    if rest.len() < 2 {
                        return Err(Error::Checkpoint(format!("malformed param line '{line}'")));
                    }
                    let name = rest[0].to_string();
                    let shape: Vec<usize> = rest[1..]
                        .iter()
                        .map(|s| {
                            s.parse::<usize>().map_err(|_| {
                                Error::Checkpoint(format!("bad shape entry '{s}' in '{line}'"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    declared.push((name, shape));
                }
                "nucleus" => {
                    let vals: Vec<f64> = rest
                        .iter()
                        .map(|s| {
                            s.parse::<f64>().map_err(|_| {
                                Error::Checkpoint(format!("bad nucleus entry '{s}'"))
                            })
                        })
                        .collect::<Result<_>>()?;
                    if vals.len() < 2 {
                        return Err(Error::Checkpoint(format!("malformed nucleus line '{line}'")));
                    }
                    let (site, charge) = vals.split_at(vals.len() - 1);
                    nuclei.push((site.to_vec(), charge[0]));
                }
                _ => {
                    fields.insert(
                        match key {
                            "arch" => "arch",
                            "n" => "n",
                            "dim" => "dim",
                            "width" => "width",
                            "depth" => "depth",
                            "self_pairs" => "self_pairs",
                            "pair_matrix_features" => "pair_matrix_features",
                            "skip" => "skip",
                            "skip_matrix" => "skip_matrix",
                            "pair_coeff" => "pair_coeff",
                            other => {
                                return Err(Error::Checkpoint(format!(
                                    "unknown header key '{other}'"
                                )))
                            }
                        },
                        rest.join(" "),
                    );
                }
            }
        }

        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing header field '{k}'")))
        };
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad integer for '{k}'")))
        };
        let parse_bool = |k: &str| -> Result<bool> {
            match get(k)?.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(Error::Checkpoint(format!("bad bool '{other}' for '{k}'"))),
            }
        };
        let skip = match get("skip")?.as_str() {
            "none" => SkipSpec::None,
            "linear" => {
                let m: Vec<f64> = get("skip_matrix")?
                    .split_whitespace()
                    .map(|s| {
                        s.parse::<f64>()
                            .map_err(|_| Error::Checkpoint(format!("bad skip matrix entry '{s}'")))
                    })
                    .collect::<Result<_>>()?;
                SkipSpec::Linear(m)
            }
            "cusp" => SkipSpec::Cusp {
                nuclei,
                pair_coeff: get("pair_coeff")?
                    .parse()
                    .map_err(|_| Error::Checkpoint("bad pair_coeff".into()))?,
            },
            other => return Err(Error::Checkpoint(format!("unknown skip kind '{other}'"))),
        };
        let config = ModelConfig {
            arch: Arch::parse(get("arch")?)?,
            n: parse_usize("n")?,
            dim: parse_usize("dim")?,
            width: parse_usize("width")?,
            depth: parse_usize("depth")?,
            self_pairs: parse_bool("self_pairs")?,
            pair_matrix_features: parse_bool("pair_matrix_features")?,
            skip,
        };
        config.validate()?;

        // The stored parameter list must match the plan implied by the
        // architecture; report any difference explicitly.
        let plan = config.parameter_plan();
        if declared.len() != plan.len() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch: checkpoint stores {} parameters, plan expects {}",
                declared.len(),
                plan.len()
            )));
        }
        for ((got_name, got_shape), (want_name, want_shape)) in declared.iter().zip(&plan) {
            if got_name != want_name || got_shape != want_shape {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: checkpoint has {got_name} {got_shape:?}, plan expects {want_name} {want_shape:?}"
                )));
            }
        }
        let total: usize = plan.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != total * 8 {
            return Err(Error::Checkpoint(format!(
                "binary payload holds {} bytes, parameters need {}",
                payload.len(),
                total * 8
            )));
        }
        let mut params = Vec::with_capacity(plan.len());
        let mut offset = 0;
        for (name, shape) in plan {
            let n_el: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n_el);
            for i in 0..n_el {
                let start = (offset + i) * 8;
                let mut buf = [0u8; 8];
                buf.copy_from_slice(&payload[start..start + 8]);
                data.push(f64::from_le_bytes(buf));
            }
            offset += n_el;
            params.push(NamedParam {
                name,
                value: Array::from_vec(&shape, data)?,
            });
        }
        Ok(DriftModel { config, params })
    }
}

/// A model whose parameters live on a specific tape.
pub struct Bound<'m> {
    model: &'m DriftModel,
    by_name: HashMap<String, ValueId>,
}

impl Bound<'_> {
    fn id(&self, name: &str) -> Result<ValueId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("model has no parameter '{name}'")))
    }

    /// Tape ids of the parameters in canonical order.
    pub fn param_ids(&self) -> Vec<ValueId> {
        self.model
            .params
            .iter()
            .map(|p| self.by_name[&p.name])
            .collect()
    }

    /// Record the drift network on the tape: (B, N, d) → (B, N, d).
    pub fn forward(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        let c = &self.model.config;
        let shape = tape.value(pos).shape().to_vec();
        if shape.len() != 3 || shape[1] != c.n || shape[2] != c.dim {
            return Err(Error::Dimension(format!(
                "model expects positions (B, {}, {}), got {:?}",
                c.n, c.dim, shape
            )));
        }
        let body = match c.arch {
            Arch::PairDrift => self.pairdrift_body(tape, pos)?,
            Arch::DeepSets => self.deepsets_body(tape, pos)?,
            Arch::Mlp => self.mlp_body(tape, pos)?,
        };
        match &c.skip {
            SkipSpec::None => Ok(body),
            SkipSpec::Linear(m) => {
                let w = tape.leaf(Array::from_vec(&[c.dim, c.dim], transpose(m, c.dim))?);
                let sk = tape.affine(&[(pos, w)], None, false)?;
                tape.add(body, sk)
            }
            SkipSpec::Cusp { nuclei, pair_coeff } => {
                let mut terms = vec![body];
                for (site, charge) in nuclei {
                    let neg_site: Vec<f64> = site.iter().map(|v| -v).collect();
                    let shifted = tape.add_row_const(pos, &neg_site)?;
                    let unit = unit_vectors(tape, shifted)?;
                    terms.push(tape.scale(unit, -charge)?);
                }
                if c.n > 1 {
                    let diffs = tape.pair_diff(pos)?;
                    let units = unit_vectors(tape, diffs)?;
                    let pooled = tape.pool_pairs(units, true)?;
                    terms.push(tape.scale(pooled, *pair_coeff)?);
                }
                tape.add_many(&terms)
            }
        }
    }

    /// Per-particle stream `a` and per-pair stream `q`, exchanging pooled
    /// messages, with hardtanh activations fused into each layer:
    ///
    /// ```text
    /// a⁰_i  = φ(r_i·Wₛ + (Σ_j Δ_ij)·Wₚ + b)        Δ_ij = r_i - r_j
    /// q⁰_ij = φ(feat(Δ_ij)·W_q + b_q)
    /// aᵏ⁺¹  = φ(aᵏ·Wₛᵏ + (Σ_j qᵏ_ij)·Wₚᵏ + bᵏ)
    /// qᵏ⁺¹  = φ(qᵏ·W_qᵏ + b_qᵏ)
    /// body  = a·Wₛᵒ + (Σ_j q_ij)·Wₚᵒ + bᵒ          (zero-initialised)
    /// ```
    fn pairdrift_body(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        let c = &self.model.config;
        let skip_diag = !c.self_pairs;
        let diffs = tape.pair_diff(pos)?;
        let pooled_diffs = tape.pool_pairs(diffs, skip_diag)?;
        let mut a = tape.affine(
            &[
                (pos, self.id("embed.single.w")?),
                (pooled_diffs, self.id("embed.pool.w")?),
            ],
            Some(self.id("embed.bias")?),
            true,
        )?;
        let mut pair_terms = vec![(diffs, self.id("embed.pair.w")?)];
        if c.pair_matrix_features {
            // Symmetric second-order features: the entries of Δ·Δᵀ, built as
            // squares plus polarisation-identity cross terms.
            let sq = tape.square(diffs)?;
            pair_terms.push((sq, self.id("embed.pair_sq.w")?));
            let crosses = c.dim * (c.dim - 1) / 2;
            if crosses > 0 {
                // (Δ_a + Δ_b)² per pair (a < b), then Δ_a·Δ_b =
                // ((Δ_a+Δ_b)² - Δ_a² - Δ_b²)/2 via constant mixing matrices.
                let mut mix = vec![0.0; c.dim * crosses];
                let mut unmix = vec![0.0; c.dim * crosses];
                let mut col = 0;
                for aa in 0..c.dim {
                    for bb in (aa + 1)..c.dim {
                        mix[aa * crosses + col] = 1.0;
                        mix[bb * crosses + col] = 1.0;
                        unmix[aa * crosses + col] = 1.0;
                        unmix[bb * crosses + col] = 1.0;
                        col += 1;
                    }
                }
                let mix_w = tape.leaf(Array::from_vec(&[c.dim, crosses], mix)?);
                let unmix_w = tape.leaf(Array::from_vec(&[c.dim, crosses], unmix)?);
                let mixed = tape.affine(&[(diffs, mix_w)], None, false)?;
                let mixed_sq = tape.square(mixed)?;
                let sum_sq = tape.affine(&[(sq, unmix_w)], None, false)?;
                let twice_cross = tape.sub(mixed_sq, sum_sq)?;
                let cross = tape.scale(twice_cross, 0.5)?;
                pair_terms.push((cross, self.id("embed.pair_cross.w")?));
            }
        }
        let mut q = tape.affine(&pair_terms, Some(self.id("embed.pair.bias")?), true)?;
        for k in 0..c.depth {
            let pooled_q = tape.pool_pairs(q, skip_diag)?;
            let a_next = tape.affine(
                &[
                    (a, self.id(&format!("block{k}.single.w"))?),
                    (pooled_q, self.id(&format!("block{k}.pool.w"))?),
                ],
                Some(self.id(&format!("block{k}.bias"))?),
                true,
            )?;
            let q_next = tape.affine(
                &[(q, self.id(&format!("block{k}.pair.w"))?)],
                Some(self.id(&format!("block{k}.pair.bias"))?),
                true,
            )?;
            a = a_next;
            q = q_next;
        }
        let pooled_q = tape.pool_pairs(q, skip_diag)?;
        tape.affine(
            &[
                (a, self.id("readout.single.w")?),
                (pooled_q, self.id("readout.pool.w")?),
            ],
            Some(self.id("readout.bias")?),
            false,
        )
    }

    /// hᵏ⁺¹_i = φ(hᵏ_i·Γᵏ + (Σ_j hᵏ_j)·Λᵏ + bᵏ), linear readout.
    fn deepsets_body(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        let c = &self.model.config;
        let mut h = pos;
        for k in 0..c.depth.max(1) {
            let pooled = tape.pool_particles(h)?;
            let bc = tape.broadcast_particles(pooled, c.n)?;
            h = tape.affine(
                &[
                    (h, self.id(&format!("block{k}.self.w"))?),
                    (bc, self.id(&format!("block{k}.pool.w"))?),
                ],
                Some(self.id(&format!("block{k}.bias"))?),
                true,
            )?;
        }
        tape.affine(
            &[(h, self.id("readout.w")?)],
            Some(self.id("readout.bias")?),
            false,
        )
    }

    fn mlp_body(&self, tape: &mut Tape, pos: ValueId) -> Result<ValueId> {
        let c = &self.model.config;
        let b = tape.value(pos).shape()[0];
        let mut h = tape.reshape(pos, &[b, c.n * c.dim])?;
        for k in 0..c.depth.max(1) {
            h = tape.affine(
                &[(h, self.id(&format!("layer{k}.w"))?)],
                Some(self.id(&format!("layer{k}.bias"))?),
                true,
            )?;
        }
        let out = tape.affine(
            &[(h, self.id("readout.w")?)],
            Some(self.id("readout.bias")?),
            false,
        )?;
        tape.reshape(out, &[b, c.n, c.dim])
    }
}

/// Regularised unit vectors over the last axis: x / (|x| + UNIT_EPS).
/// Exact zero vectors map to zero.
fn unit_vectors(tape: &mut Tape, x: ValueId) -> Result<ValueId> {
    let rank = tape.value(x).rank();
    let sq = tape.square(x)?;
    let d2 = tape.sum_axis(sq, rank - 1)?;
    let dist = tape.sqrt(d2)?;
    let denom = tape.add_scalar(dist, UNIT_EPS)?;
    let inv = tape.reciprocal(denom)?;
    tape.scale_rows(x, inv)
}

/// Row-major transpose of a square matrix, so the affine `x·Wᵀ` applies the
/// matrix in the conventional `W·x` (column-vector) sense.
fn transpose(m: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            out[j * d + i] = m[i * d + j];
        }
    }
    out
}

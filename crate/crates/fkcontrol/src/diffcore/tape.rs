use super::array::Array;
use super::gemm;
use super::sum::{fsum, fsum_strided};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

/// Elementwise unary operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    /// x²
    Square,
    /// √x, requires x ≥ 0
    Sqrt,
    /// 1/x, requires x ≠ 0 and no overflow
    Reciprocal,
    /// clamp to [-1, 1]; subgradient 0 on the saturated region *including*
    /// the kinks at ±1
    HardTanh,
    /// eˣ, requires no overflow
    Exp,
    /// -x
    Neg,
}

/// Elementwise binary operations on same-shape arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Reduction flavours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// One recorded operation. Inputs are earlier node ids, so the node list is
/// already a topological order and the backward sweep is a single reverse
/// pass.
#[derive(Clone, Debug)]
enum Op {
    /// Constant input: no gradient is propagated past it, but its adjoint is
    /// retained (gradients *with respect to* leaves are often wanted, e.g.
    /// position derivatives for divergence computations).
    Leaf,
    /// Trainable input.
    Param,
    /// Identity value, zero gradient: blocks the backward sweep.
    Detach(ValueId),
    Unary(Unary, ValueId),
    Binary(Binary, ValueId, ValueId),
    /// c · x for a compile-time constant c.
    Scale(ValueId, f64),
    /// x + c elementwise.
    AddScalar(ValueId, f64),
    /// Elementwise sum of several same-shape values, correctly rounded per
    /// element (order-independent).
    AddMany(Vec<ValueId>),
    /// Strict 2-D matrix product.
    Matmul(ValueId, ValueId),
    /// Fused `Σ_k x_k · W_k (+ bias) (then hardtanh)`. Each `x_k` is treated
    /// as a stack of rows over its last axis. Fusing the sum, bias, and
    /// activation keeps one stored array per layer instead of four, which is
    /// what makes backprop through thousand-step rollouts fit in memory.
    Affine {
        terms: Vec<(ValueId, ValueId)>,
        bias: Option<ValueId>,
        hardtanh: bool,
    },
    /// Sum or mean over one axis (`Some`) or all elements (`None`).
    Reduce {
        kind: ReduceKind,
        x: ValueId,
        axis: Option<usize>,
    },
    /// out[..., k] = x[..., k] · s[...]; `s` has the leading shape of `x`.
    ScaleRows { x: ValueId, s: ValueId },
    /// x + row (row broadcast over all leading axes). The row is constant.
    AddRowConst { x: ValueId, row: Vec<f64> },
    /// Adds `c` to the diagonal entries (i == j) of a (B, N, N) or
    /// (B, N, N, F) array. Used to make pairwise denominators safe on the
    /// self-pair diagonal before it is excluded from pooling.
    AddDiagConst { x: ValueId, c: f64 },
    /// (B, N, D) → (B, N, N, D): out[b,i,j] = x[b,i] - x[b,j].
    PairDiff(ValueId),
    /// (B, N, N, F) → (B, N, F): correctly rounded sum over j, optionally
    /// excluding the diagonal j == i.
    PoolPairs { x: ValueId, skip_diag: bool },
    /// (B, N, F) → (B, F): correctly rounded sum over the particle axis.
    PoolParticles(ValueId),
    /// (B, F) → (B, N, F): repeat each row N times.
    BroadcastParticles { x: ValueId, n: usize },
    /// Swap the last two axes.
    TransposeLast2(ValueId),
    /// Same data, new shape (element counts must agree).
    Reshape { x: ValueId, shape: Vec<usize> },
}

struct Node {
    op: Op,
    value: Array,
}

/// Define-by-run reverse-mode tape. Record operations through the builder
/// methods, then call [`Tape::backward`] on a scalar output. A tape is
/// single-use per rollout: build, differentiate, drop.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<ValueId>,
}

/// Adjoints produced by a backward sweep. Only leaf and parameter adjoints
/// are retained (intermediate adjoints are freed as soon as they have been
/// consumed). `wrt` returns `None` for values the output does not depend on,
/// which represents a zero gradient.
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn wrt(&self, id: ValueId) -> Option<&Array> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Array> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The recorded value of a node.
    pub fn value(&self, id: ValueId) -> &Array {
        &self.nodes[id.0].value
    }

    /// Parameter ids in registration order.
    pub fn params(&self) -> &[ValueId] {
        &self.params
    }

    fn check_id(&self, id: ValueId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "value id {} does not belong to this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<ValueId> {
        let value = compute_value(&op, &|id| &self.nodes[id.0].value)?;
        self.nodes.push(Node { op, value });
        Ok(ValueId(self.nodes.len() - 1))
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Array) -> ValueId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Record a trainable input.
    pub fn param(&mut self, value: Array) -> ValueId {
        self.nodes.push(Node {
            op: Op::Param,
            value,
        });
        let id = ValueId(self.nodes.len() - 1);
        self.params.push(id);
        id
    }

    pub fn detach(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::Detach(x))
    }

    pub fn unary(&mut self, kind: Unary, x: ValueId) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::Unary(kind, x))
    }

    pub fn square(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Square, x)
    }
    pub fn sqrt(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Sqrt, x)
    }
    pub fn reciprocal(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Reciprocal, x)
    }
    pub fn hardtanh(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::HardTanh, x)
    }
    pub fn exp(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Exp, x)
    }
    pub fn neg(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary(Unary::Neg, x)
    }

    pub fn binary(&mut self, kind: Binary, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.push(Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.check_id(x)?;
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {c}")));
        }
        self.push(Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.check_id(x)?;
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("add_scalar constant {c}")));
        }
        self.push(Op::AddScalar(x, c))
    }

    /// Elementwise sum of several same-shape values (correctly rounded, so
    /// independent of list order).
    pub fn add_many(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        for &x in xs {
            self.check_id(x)?;
        }
        if xs.is_empty() {
            return Err(Error::Contract("add_many needs at least one input".into()));
        }
        self.push(Op::AddMany(xs.to_vec()))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.push(Op::Matmul(a, b))
    }

    /// Fused affine layer: `Σ_k rows(x_k) · W_k (+ bias)`, optionally passed
    /// through hardtanh. Each `x_k` may have any rank ≥ 1; its last axis is
    /// the input feature axis and all terms must share the same leading shape.
    pub fn affine(
        &mut self,
        terms: &[(ValueId, ValueId)],
        bias: Option<ValueId>,
        hardtanh: bool,
    ) -> Result<ValueId> {
        for &(x, w) in terms {
            self.check_id(x)?;
            self.check_id(w)?;
        }
        if let Some(b) = bias {
            self.check_id(b)?;
        }
        if terms.is_empty() {
            return Err(Error::Contract("affine needs at least one term".into()));
        }
        self.push(Op::Affine {
            terms: terms.to_vec(),
            bias,
            hardtanh,
        })
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: ValueId, axis: Option<usize>) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::Reduce { kind, x, axis })
    }

    pub fn sum_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        self.reduce(ReduceKind::Sum, x, Some(axis))
    }
    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        self.reduce(ReduceKind::Mean, x, Some(axis))
    }
    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.reduce(ReduceKind::Sum, x, None)
    }
    pub fn mean_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.reduce(ReduceKind::Mean, x, None)
    }

    pub fn scale_rows(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.check_id(x)?;
        self.check_id(s)?;
        self.push(Op::ScaleRows { x, s })
    }

    pub fn add_row_const(&mut self, x: ValueId, row: &[f64]) -> Result<ValueId> {
        self.check_id(x)?;
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("add_row_const entry {v}")));
        }
        self.push(Op::AddRowConst {
            x,
            row: row.to_vec(),
        })
    }

    pub fn add_diag_const(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.check_id(x)?;
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("add_diag_const constant {c}")));
        }
        self.push(Op::AddDiagConst { x, c })
    }

    pub fn pair_diff(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::PairDiff(x))
    }

    pub fn pool_pairs(&mut self, x: ValueId, skip_diag: bool) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::PoolPairs { x, skip_diag })
    }

    pub fn pool_particles(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::PoolParticles(x))
    }

    pub fn broadcast_particles(&mut self, x: ValueId, n: usize) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::BroadcastParticles { x, n })
    }

    pub fn transpose_last2(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::TransposeLast2(x))
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        self.check_id(x)?;
        self.push(Op::Reshape {
            x,
            shape: shape.to_vec(),
        })
    }

    /// Recompute every node from the leaves and check the recorded values are
    /// reproduced bit for bit. Forward evaluation is deterministic, so this
    /// must always hold; it exists as a self-check for tests.
    pub fn replay_matches(&self) -> Result<bool> {
        let mut replayed: Vec<Array> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match &node.op {
                Op::Leaf | Op::Param => node.value.clone(),
                op => compute_value(op, &|id| &replayed[id.0])?,
            };
            replayed.push(value);
        }
        Ok(self
            .nodes
            .iter()
            .zip(&replayed)
            .all(|(n, r)| n.value.shape() == r.shape()
                && n.value
                    .data()
                    .iter()
                    .zip(r.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())))
    }

    /// Reverse sweep from a one-element output with seed 1.
    pub fn backward(&self, out: ValueId) -> Result<Gradients> {
        self.check_id(out)?;
        let v = self.value(out);
        if v.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                v.shape()
            )));
        }
        let seed = Array::from_parts(v.shape().to_vec(), vec![1.0]);
        self.backward_seeded(out, &seed)
    }

    /// Reverse sweep from an arbitrary output with an explicit adjoint seed
    /// (same shape as the output). Computes `Jᵀ·seed` into leaf and parameter
    /// adjoints.
    pub fn backward_seeded(&self, out: ValueId, seed: &Array) -> Result<Gradients> {
        self.check_id(out)?;
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Dimension(format!(
                "seed shape {:?} does not match output shape {:?}",
                seed.shape(),
                self.value(out).shape()
            )));
        }
        let mut grads: Vec<Option<Array>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[out.0] = Some(seed.clone());
        for id in (0..=out.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match node.op {
                // Keep adjoints of inputs; free everything else as consumed.
                Op::Leaf | Op::Param => grads[id] = Some(g),
                _ => self.propagate(&node.op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(Gradients { grads })
    }

    /// Parameter gradients in registration order; parameters the output does
    /// not depend on get explicit zeros.
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<Array> {
        self.params
            .iter()
            .map(|&id| match grads.wrt(id) {
                Some(g) => g.clone(),
                None => Array::zeros(self.value(id).shape()),
            })
            .collect()
    }

    fn propagate(
        &self,
        op: &Op,
        y: &Array,
        g: &Array,
        grads: &mut Vec<Option<Array>>,
    ) -> Result<()> {
        let val = |id: ValueId| -> &Array { &self.nodes[id.0].value };
        match op {
            Op::Leaf | Op::Param => unreachable!("handled by caller"),
            Op::Detach(_) => {}
            Op::Unary(kind, x) => {
                let xv = val(*x);
                acc(grads, *x, xv.shape(), |gx| {
                    let gx = gx.data_mut();
                    let gd = g.data();
                    match kind {
                        Unary::Square => {
                            for i in 0..gx.len() {
                                gx[i] += gd[i] * 2.0 * xv.data()[i];
                            }
                        }
                        Unary::Sqrt => {
                            for i in 0..gx.len() {
                                // Skip zero adjoints so masked-out zeros (e.g.
                                // the self-pair diagonal) cannot produce 0/0.
                                if gd[i] != 0.0 {
                                    gx[i] += gd[i] / (2.0 * y.data()[i]);
                                }
                            }
                        }
                        Unary::Reciprocal => {
                            for i in 0..gx.len() {
                                gx[i] -= gd[i] * y.data()[i] * y.data()[i];
                            }
                        }
                        Unary::HardTanh => {
                            // |y| < 1 identifies the unsaturated region; the
                            // kinks themselves map to |y| == 1 and get
                            // subgradient 0.
                            for i in 0..gx.len() {
                                if y.data()[i].abs() < 1.0 {
                                    gx[i] += gd[i];
                                }
                            }
                        }
                        Unary::Exp => {
                            for i in 0..gx.len() {
                                gx[i] += gd[i] * y.data()[i];
                            }
                        }
                        Unary::Neg => {
                            for i in 0..gx.len() {
                                gx[i] -= gd[i];
                            }
                        }
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                match kind {
                    Binary::Add => {
                        acc(grads, *a, av.shape(), |ga| add_assign(ga, g.data(), 1.0));
                        acc(grads, *b, bv.shape(), |gb| add_assign(gb, g.data(), 1.0));
                    }
                    Binary::Sub => {
                        acc(grads, *a, av.shape(), |ga| add_assign(ga, g.data(), 1.0));
                        acc(grads, *b, bv.shape(), |gb| add_assign(gb, g.data(), -1.0));
                    }
                    Binary::Mul => {
                        acc(grads, *a, av.shape(), |ga| {
                            let ga = ga.data_mut();
                            for i in 0..ga.len() {
                                ga[i] += g.data()[i] * bv.data()[i];
                            }
                        });
                        acc(grads, *b, bv.shape(), |gb| {
                            let gb = gb.data_mut();
                            for i in 0..gb.len() {
                                gb[i] += g.data()[i] * av.data()[i];
                            }
                        });
                    }
                }
            }
            Op::Scale(x, c) => {
                acc(grads, *x, val(*x).shape(), |gx| add_assign(gx, g.data(), *c));
            }
            Op::AddScalar(x, _) => {
                acc(grads, *x, val(*x).shape(), |gx| add_assign(gx, g.data(), 1.0));
            }
            Op::AddMany(xs) => {
                for &x in xs {
                    acc(grads, x, val(x).shape(), |gx| add_assign(gx, g.data(), 1.0));
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                acc(grads, *a, av.shape(), |ga| {
                    gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 1.0, ga.data_mut());
                });
                acc(grads, *b, bv.shape(), |gb| {
                    gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 1.0, gb.data_mut());
                });
            }
            Op::Affine {
                terms,
                bias,
                hardtanh,
            } => {
                let out_dim = *y.shape().last().expect("affine output has a last axis");
                let rows = y.len() / out_dim;
                // Pre-activation adjoint: mask out saturated outputs first.
                let g_pre: Vec<f64> = if *hardtanh {
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gi, &yi)| if yi.abs() < 1.0 { gi } else { 0.0 })
                        .collect()
                } else {
                    g.data().to_vec()
                };
                for &(x, w) in terms {
                    let (xv, wv) = (val(x), val(w));
                    let in_dim = wv.shape()[0];
                    acc(grads, x, xv.shape(), |gx| {
                        gemm(
                            rows,
                            out_dim,
                            in_dim,
                            1.0,
                            &g_pre,
                            false,
                            wv.data(),
                            true,
                            1.0,
                            gx.data_mut(),
                        );
                    });
                    acc(grads, w, wv.shape(), |gw| {
                        gemm(
                            in_dim,
                            rows,
                            out_dim,
                            1.0,
                            xv.data(),
                            true,
                            &g_pre,
                            false,
                            1.0,
                            gw.data_mut(),
                        );
                    });
                }
                if let Some(b) = bias {
                    acc(grads, *b, val(*b).shape(), |gb| {
                        let gb = gb.data_mut();
                        for r in 0..rows {
                            for c in 0..out_dim {
                                gb[c] += g_pre[r * out_dim + c];
                            }
                        }
                    });
                }
            }
            Op::Reduce { kind, x, axis } => {
                let xv = val(*x);
                match axis {
                    None => {
                        let gv = g.data()[0];
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / xv.len() as f64,
                        };
                        acc(grads, *x, xv.shape(), |gx| {
                            for v in gx.data_mut() {
                                *v += gv * scale;
                            }
                        });
                    }
                    Some(ax) => {
                        let shape = xv.shape();
                        let cnt = shape[*ax];
                        let inner: usize = shape[ax + 1..].iter().product();
                        let outer: usize = shape[..*ax].iter().product();
                        let scale = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / cnt as f64,
                        };
                        acc(grads, *x, shape, |gx| {
                            let gx = gx.data_mut();
                            for o in 0..outer {
                                for k in 0..cnt {
                                    let base = (o * cnt + k) * inner;
                                    let gbase = o * inner;
                                    for i in 0..inner {
                                        gx[base + i] += g.data()[gbase + i] * scale;
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let (xv, sv) = (val(*x), val(*s));
                let (rows, last) = xv.rows_cols();
                acc(grads, *x, xv.shape(), |gx| {
                    let gx = gx.data_mut();
                    for r in 0..rows {
                        let sr = sv.data()[r];
                        for c in 0..last {
                            gx[r * last + c] += g.data()[r * last + c] * sr;
                        }
                    }
                });
                acc(grads, *s, sv.shape(), |gs| {
                    let gs = gs.data_mut();
                    for r in 0..rows {
                        let mut acc_r = 0.0;
                        for c in 0..last {
                            acc_r += g.data()[r * last + c] * xv.data()[r * last + c];
                        }
                        gs[r] += acc_r;
                    }
                });
            }
            Op::AddRowConst { x, .. } | Op::AddDiagConst { x, .. } => {
                acc(grads, *x, val(*x).shape(), |gx| add_assign(gx, g.data(), 1.0));
            }
            Op::PairDiff(x) => {
                let xv = val(*x);
                let (bsz, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                acc(grads, *x, xv.shape(), |gx| {
                    let gx = gx.data_mut();
                    let gd = g.data();
                    for b in 0..bsz {
                        for k in 0..n {
                            for c in 0..d {
                                // +g[b,k,j,c] over j, -g[b,i,k,c] over i, in
                                // one correctly rounded sum.
                                let plus = (0..n).map(|j| gd[((b * n + k) * n + j) * d + c]);
                                let minus = (0..n).map(|i| -gd[((b * n + i) * n + k) * d + c]);
                                gx[(b * n + k) * d + c] += fsum(plus.chain(minus));
                            }
                        }
                    }
                });
            }
            Op::PoolPairs { x, skip_diag } => {
                let xv = val(*x);
                let (bsz, n, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[3]);
                acc(grads, *x, xv.shape(), |gx| {
                    let gx = gx.data_mut();
                    for b in 0..bsz {
                        for i in 0..n {
                            for j in 0..n {
                                if *skip_diag && i == j {
                                    continue;
                                }
                                let src = (b * n + i) * f;
                                let dst = ((b * n + i) * n + j) * f;
                                for c in 0..f {
                                    gx[dst + c] += g.data()[src + c];
                                }
                            }
                        }
                    }
                });
            }
            Op::PoolParticles(x) => {
                let xv = val(*x);
                let (bsz, n, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                acc(grads, *x, xv.shape(), |gx| {
                    let gx = gx.data_mut();
                    for b in 0..bsz {
                        for k in 0..n {
                            for c in 0..f {
                                gx[(b * n + k) * f + c] += g.data()[b * f + c];
                            }
                        }
                    }
                });
            }
            Op::BroadcastParticles { x, n } => {
                let xv = val(*x);
                let (bsz, f) = (xv.shape()[0], xv.shape()[1]);
                acc(grads, *x, xv.shape(), |gx| {
                    let gx = gx.data_mut();
                    for b in 0..bsz {
                        for c in 0..f {
                            gx[b * f + c] +=
                                fsum_strided(g.data(), (b * n) * f + c, f, *n);
                        }
                    }
                });
            }
            Op::TransposeLast2(x) => {
                let xv = val(*x);
                let shape = xv.shape();
                let rank = shape.len();
                let (r, c) = (shape[rank - 2], shape[rank - 1]);
                let lead: usize = shape[..rank - 2].iter().product();
                acc(grads, *x, shape, |gx| {
                    let gx = gx.data_mut();
                    for l in 0..lead {
                        let base = l * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[base + i * c + j] += g.data()[base + j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Reshape { x, .. } => {
                acc(grads, *x, val(*x).shape(), |gx| add_assign(gx, g.data(), 1.0));
            }
        }
        Ok(())
    }
}

fn acc(
    grads: &mut [Option<Array>],
    id: ValueId,
    shape: &[usize],
    f: impl FnOnce(&mut Array),
) {
    let slot = &mut grads[id.0];
    if slot.is_none() {
        *slot = Some(Array::zeros(shape));
    }
    f(slot.as_mut().expect("just initialised"));
}

fn add_assign(target: &mut Array, src: &[f64], scale: f64) {
    let t = target.data_mut();
    for i in 0..t.len() {
        t[i] += src[i] * scale;
    }
}

fn same_shape(what: &str, a: &Array, b: &Array) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Evaluate one op from its input values. Shared between recording and
/// replay so both paths are bit-identical by construction. All shape and
/// numeric-domain validation lives here.
fn compute_value<'a>(op: &Op, val: &dyn Fn(ValueId) -> &'a Array) -> Result<Array> {
    match op {
        Op::Leaf | Op::Param => unreachable!("inputs carry their own values"),
        Op::Detach(x) => Ok(val(*x).clone()),
        Op::Unary(kind, x) => {
            let xv = val(*x);
            let mut out = Vec::with_capacity(xv.len());
            match kind {
                Unary::Square => out.extend(xv.data().iter().map(|v| v * v)),
                Unary::Sqrt => {
                    for (i, &v) in xv.data().iter().enumerate() {
                        if v < 0.0 {
                            return Err(Error::Domain(format!(
                                "sqrt of negative value {v} at element {i}"
                            )));
                        }
                        out.push(v.sqrt());
                    }
                }
                Unary::Reciprocal => {
                    for (i, &v) in xv.data().iter().enumerate() {
                        let r = 1.0 / v;
                        if !r.is_finite() {
                            return Err(Error::Domain(format!(
                                "reciprocal of {v} at element {i} is not finite"
                            )));
                        }
                        out.push(r);
                    }
                }
                Unary::HardTanh => out.extend(xv.data().iter().map(|v| v.clamp(-1.0, 1.0))),
                Unary::Exp => {
                    for (i, &v) in xv.data().iter().enumerate() {
                        let r = v.exp();
                        if !r.is_finite() {
                            return Err(Error::Domain(format!(
                                "exp of {v} at element {i} overflows"
                            )));
                        }
                        out.push(r);
                    }
                }
                Unary::Neg => out.extend(xv.data().iter().map(|v| -v)),
            }
            Ok(Array::from_parts(xv.shape().to_vec(), out))
        }
        Op::Binary(kind, a, b) => {
            let (av, bv) = (val(*a), val(*b));
            same_shape("binary op", av, bv)?;
            let data = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                })
                .collect();
            Ok(Array::from_parts(av.shape().to_vec(), data))
        }
        Op::Scale(x, c) => {
            let xv = val(*x);
            Ok(Array::from_parts(
                xv.shape().to_vec(),
                xv.data().iter().map(|v| v * c).collect(),
            ))
        }
        Op::AddScalar(x, c) => {
            let xv = val(*x);
            Ok(Array::from_parts(
                xv.shape().to_vec(),
                xv.data().iter().map(|v| v + c).collect(),
            ))
        }
        Op::AddMany(xs) => {
            let first = val(xs[0]);
            for &x in &xs[1..] {
                same_shape("add_many", first, val(x))?;
            }
            let mut out = Vec::with_capacity(first.len());
            for e in 0..first.len() {
                out.push(fsum(xs.iter().map(|&x| val(x).data()[e])));
            }
            Ok(Array::from_parts(first.shape().to_vec(), out))
        }
        Op::Matmul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if av.rank() != 2 || bv.rank() != 2 {
                return Err(Error::Dimension(format!(
                    "matmul requires rank-2 inputs, got {:?} and {:?}",
                    av.shape(),
                    bv.shape()
                )));
            }
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let (k2, n) = (bv.shape()[0], bv.shape()[1]);
            if k != k2 {
                return Err(Error::Dimension(format!(
                    "matmul inner dimensions {k} and {k2} differ"
                )));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
            Ok(Array::from_parts(vec![m, n], out))
        }
        Op::Affine {
            terms,
            bias,
            hardtanh,
        } => {
            let (x0, w0) = (val(terms[0].0), val(terms[0].1));
            if x0.rank() == 0 {
                return Err(Error::Dimension("affine input must have rank >= 1".into()));
            }
            let lead = &x0.shape()[..x0.rank() - 1];
            let rows: usize = lead.iter().product();
            if w0.rank() != 2 {
                return Err(Error::Dimension(format!(
                    "affine weight must be rank 2, got {:?}",
                    w0.shape()
                )));
            }
            let out_dim = w0.shape()[1];
            for &(x, w) in terms {
                let (xv, wv) = (val(x), val(w));
                if wv.rank() != 2 || wv.shape()[1] != out_dim {
                    return Err(Error::Dimension(format!(
                        "affine weights disagree on output dim: {:?} vs {out_dim}",
                        wv.shape()
                    )));
                }
                if xv.rank() == 0 || &xv.shape()[..xv.rank() - 1] != lead {
                    return Err(Error::Dimension(format!(
                        "affine terms disagree on leading shape: {:?} vs {:?}",
                        xv.shape(),
                        lead
                    )));
                }
                if xv.shape()[xv.rank() - 1] != wv.shape()[0] {
                    return Err(Error::Dimension(format!(
                        "affine input dim {} does not match weight {:?}",
                        xv.shape()[xv.rank() - 1],
                        wv.shape()
                    )));
                }
            }
            let mut out = vec![0.0; rows * out_dim];
            if let Some(b) = bias {
                let bv = val(*b);
                if bv.rank() != 1 || bv.shape()[0] != out_dim {
                    return Err(Error::Dimension(format!(
                        "affine bias shape {:?} does not match output dim {out_dim}",
                        bv.shape()
                    )));
                }
                for r in 0..rows {
                    out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bv.data());
                }
            }
            for &(x, w) in terms {
                let (xv, wv) = (val(x), val(w));
                let in_dim = wv.shape()[0];
                gemm(
                    rows,
                    in_dim,
                    out_dim,
                    1.0,
                    xv.data(),
                    false,
                    wv.data(),
                    false,
                    1.0,
                    &mut out,
                );
            }
            if *hardtanh {
                for v in &mut out {
                    *v = v.clamp(-1.0, 1.0);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(out_dim);
            Ok(Array::from_parts(shape, out))
        }
        Op::Reduce { kind, x, axis } => {
            let xv = val(*x);
            match axis {
                None => {
                    if xv.is_empty() {
                        return Err(Error::Dimension("reduce over empty array".into()));
                    }
                    let s = fsum(xv.data().iter().copied());
                    let v = match kind {
                        ReduceKind::Sum => s,
                        ReduceKind::Mean => s / xv.len() as f64,
                    };
                    Ok(Array::scalar(v))
                }
                Some(ax) => {
                    if *ax >= xv.rank() {
                        return Err(Error::Dimension(format!(
                            "reduce axis {ax} out of range for shape {:?}",
                            xv.shape()
                        )));
                    }
                    let shape = xv.shape();
                    let cnt = shape[*ax];
                    if cnt == 0 {
                        return Err(Error::Dimension("reduce over empty axis".into()));
                    }
                    let inner: usize = shape[ax + 1..].iter().product();
                    let outer: usize = shape[..*ax].iter().product();
                    let mut out = Vec::with_capacity(outer * inner);
                    for o in 0..outer {
                        for i in 0..inner {
                            let s = fsum_strided(xv.data(), o * cnt * inner + i, inner, cnt);
                            out.push(match kind {
                                ReduceKind::Sum => s,
                                ReduceKind::Mean => s / cnt as f64,
                            });
                        }
                    }
                    let mut oshape = shape.to_vec();
                    oshape.remove(*ax);
                    Ok(Array::from_parts(oshape, out))
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let (xv, sv) = (val(*x), val(*s));
            if xv.rank() == 0 || sv.shape() != &xv.shape()[..xv.rank() - 1] {
                return Err(Error::Dimension(format!(
                    "scale_rows: scale shape {:?} must equal leading shape of {:?}",
                    sv.shape(),
                    xv.shape()
                )));
            }
            let (rows, last) = xv.rows_cols();
            let mut out = Vec::with_capacity(xv.len());
            for r in 0..rows {
                let sr = sv.data()[r];
                for c in 0..last {
                    out.push(xv.data()[r * last + c] * sr);
                }
            }
            Ok(Array::from_parts(xv.shape().to_vec(), out))
        }
        Op::AddRowConst { x, row } => {
            let xv = val(*x);
            let (rows, last) = xv.rows_cols();
            if row.len() != last {
                return Err(Error::Dimension(format!(
                    "add_row_const: row length {} does not match last axis {last}",
                    row.len()
                )));
            }
            let mut out = Vec::with_capacity(xv.len());
            for r in 0..rows {
                for c in 0..last {
                    out.push(xv.data()[r * last + c] + row[c]);
                }
            }
            Ok(Array::from_parts(xv.shape().to_vec(), out))
        }
        Op::AddDiagConst { x, c } => {
            let xv = val(*x);
            let shape = xv.shape();
            let ok = (shape.len() == 3 && shape[1] == shape[2])
                || (shape.len() == 4 && shape[1] == shape[2]);
            if !ok {
                return Err(Error::Dimension(format!(
                    "add_diag_const requires (B,N,N) or (B,N,N,F), got {:?}",
                    shape
                )));
            }
            let (bsz, n) = (shape[0], shape[1]);
            let f = if shape.len() == 4 { shape[3] } else { 1 };
            let mut out = xv.data().to_vec();
            for b in 0..bsz {
                for i in 0..n {
                    let base = ((b * n + i) * n + i) * f;
                    for k in 0..f {
                        out[base + k] += c;
                    }
                }
            }
            Ok(Array::from_parts(shape.to_vec(), out))
        }
        Op::PairDiff(x) => {
            let xv = val(*x);
            if xv.rank() != 3 {
                return Err(Error::Dimension(format!(
                    "pair_diff requires (B,N,D), got {:?}",
                    xv.shape()
                )));
            }
            let (bsz, n, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let mut out = Vec::with_capacity(bsz * n * n * d);
            for b in 0..bsz {
                for i in 0..n {
                    for j in 0..n {
                        let pi = (b * n + i) * d;
                        let pj = (b * n + j) * d;
                        for c in 0..d {
                            out.push(xv.data()[pi + c] - xv.data()[pj + c]);
                        }
                    }
                }
            }
            Ok(Array::from_parts(vec![bsz, n, n, d], out))
        }
        Op::PoolPairs { x, skip_diag } => {
            let xv = val(*x);
            if xv.rank() != 4 || xv.shape()[1] != xv.shape()[2] {
                return Err(Error::Dimension(format!(
                    "pool_pairs requires (B,N,N,F), got {:?}",
                    xv.shape()
                )));
            }
            let (bsz, n, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[3]);
            let mut out = Vec::with_capacity(bsz * n * f);
            for b in 0..bsz {
                for i in 0..n {
                    for c in 0..f {
                        let s = fsum((0..n).filter(|&j| !(*skip_diag && j == i)).map(|j| {
                            xv.data()[((b * n + i) * n + j) * f + c]
                        }));
                        out.push(s);
                    }
                }
            }
            Ok(Array::from_parts(vec![bsz, n, f], out))
        }
        Op::PoolParticles(x) => {
            let xv = val(*x);
            if xv.rank() != 3 {
                return Err(Error::Dimension(format!(
                    "pool_particles requires (B,N,F), got {:?}",
                    xv.shape()
                )));
            }
            let (bsz, n, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let mut out = Vec::with_capacity(bsz * f);
            for b in 0..bsz {
                for c in 0..f {
                    out.push(fsum_strided(xv.data(), (b * n) * f + c, f, n));
                }
            }
            Ok(Array::from_parts(vec![bsz, f], out))
        }
        Op::BroadcastParticles { x, n } => {
            let xv = val(*x);
            if xv.rank() != 2 {
                return Err(Error::Dimension(format!(
                    "broadcast_particles requires (B,F), got {:?}",
                    xv.shape()
                )));
            }
            let (bsz, f) = (xv.shape()[0], xv.shape()[1]);
            let mut out = Vec::with_capacity(bsz * n * f);
            for b in 0..bsz {
                for _ in 0..*n {
                    out.extend_from_slice(&xv.data()[b * f..(b + 1) * f]);
                }
            }
            Ok(Array::from_parts(vec![bsz, *n, f], out))
        }
        Op::TransposeLast2(x) => {
            let xv = val(*x);
            if xv.rank() < 2 {
                return Err(Error::Dimension(format!(
                    "transpose_last2 requires rank >= 2, got {:?}",
                    xv.shape()
                )));
            }
            let shape = xv.shape();
            let rank = shape.len();
            let (r, c) = (shape[rank - 2], shape[rank - 1]);
            let lead: usize = shape[..rank - 2].iter().product();
            let mut out = vec![0.0; xv.len()];
            for l in 0..lead {
                let base = l * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[base + j * r + i] = xv.data()[base + i * c + j];
                    }
                }
            }
            let mut oshape = shape.to_vec();
            oshape[rank - 2] = c;
            oshape[rank - 1] = r;
            Ok(Array::from_parts(oshape, out))
        }
        Op::Reshape { x, shape } => {
            let xv = val(*x);
            let numel: usize = shape.iter().product();
            if numel != xv.len() {
                return Err(Error::Dimension(format!(
                    "reshape {:?} -> {:?} changes element count",
                    xv.shape(),
                    shape
                )));
            }
            Ok(Array::from_parts(shape.clone(), xv.data().to_vec()))
        }
    }
}

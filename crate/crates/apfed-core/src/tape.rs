//! Reverse-mode autodiff on a linear tape.
//!
//! A [`Tape`] records executed operations eagerly; each op holds the ids of
//! its inputs, which always precede it on the tape. [`Tape::backward`] walks
//! the record once in reverse, accumulating adjoints, and deposits parameter
//! gradients into the owning [`ParamStore`]. Input leaves created with
//! [`Tape::input`] keep their adjoint readable afterwards, which is how a
//! client exports the gradient of a received representation batch.
//!
//! Parameters live outside the tape so they survive across steps; a forward
//! pass copies their current values onto the tape as leaves. Reductions
//! (sums, means, bias gradients, log-sum-exp) accumulate in f64 regardless
//! of the element type.

use crate::error::TensorError;
use crate::scalar::{cast, to_f64, Scalar};
use crate::tensor::{matmul_into, Tensor};

// ── Parameters ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    velocity: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        let velocity = Tensor::zeros(value.shape().to_vec());
        Parameter {
            name,
            value,
            grad,
            velocity,
        }
    }
}

/// Owns every trainable parameter of one role (client or server).
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name:?}"
        );
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Simultaneous mutable views of (value, grad, velocity) for the
    /// optimizer's update loop.
    pub(crate) fn param_mut_for_update(
        &mut self,
        id: ParamId,
    ) -> (&mut [T], &mut [T], &mut [T]) {
        let p = &mut self.params[id.0];
        (
            p.value.data_mut(),
            p.grad.data_mut(),
            p.velocity.data_mut(),
        )
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[T]) {
        let gd = self.params[id.0].grad.data_mut();
        debug_assert_eq!(gd.len(), g.len());
        for (a, b) in gd.iter_mut().zip(g.iter()) {
            *a = *a + *b;
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Matmul { a: ValueId, b: ValueId },
    Transpose { a: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddRow { a: ValueId, b: ValueId },
    Scale { a: ValueId, c: f64 },
    AddScalar { a: ValueId },
    Relu { a: ValueId },
    Exp { a: ValueId },
    Ln { a: ValueId },
    Sqrt { a: ValueId },
    SumAll { a: ValueId },
    MeanAll { a: ValueId },
    RowSum { a: ValueId },
    DivCol { a: ValueId, v: ValueId },
    SubCol { a: ValueId, v: ValueId },
    Diag { a: ValueId },
    ConcatCols { parts: Vec<ValueId> },
    CrossEntropy { logits: ValueId, labels: Vec<u32> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    adjoints: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Adjoint of a node from the most recent backward pass. Zero if the
    /// node was never reached or is untracked.
    pub fn grad(&self, id: ValueId) -> Tensor<T> {
        match self.adjoints.get(id.0) {
            Some(Some(g)) => Tensor::new(self.nodes[id.0].value.shape().to_vec(), g.clone()),
            _ => Tensor::zeros(self.nodes[id.0].value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> ValueId {
        self.nodes.push(Node { value, op, tracked });
        ValueId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: ValueId) -> bool {
        self.nodes[id.0].tracked
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> ValueId {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf whose adjoint stays readable after backward.
    pub fn input(&mut self, t: Tensor<T>) -> ValueId {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the current parameter value onto the tape; backward adds the
    /// adjoint into the parameter's grad accumulator.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> ValueId {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    // ── Forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_into(
            out.data_mut(),
            self.value(a).data(),
            self.value(b).data(),
            m,
            ka,
            n,
        );
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Matmul { a, b }, tracked))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId, TensorError> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::new(vec![c, r], data), Op::Transpose { a }, tracked))
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<ValueId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::DimMismatch {
                op: op_name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(shape, data), op, tracked))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Broadcast add of a row vector b[m] over every row of a[n x m].
    pub fn add_row(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let (n, m) = self.value(a).dims2("add_row")?;
        if self.value(b).shape() != [m] {
            return Err(TensorError::DimMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] = data[i * m + j] + bv[j];
            }
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Tensor::new(vec![n, m], data), Op::AddRow { a, b }, tracked))
    }

    /// x W + b for x[n x in], W[in x out], b[out].
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn elementwise_one(
        &mut self,
        a: ValueId,
        f: impl Fn(T) -> T,
        op: Op,
    ) -> ValueId {
        let data: Vec<T> = self.value(a).data().iter().map(|&x| f(x)).collect();
        let shape = self.value(a).shape().to_vec();
        let tracked = self.tracked(a);
        self.push(Tensor::new(shape, data), op, tracked)
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let cf: T = cast(c);
        self.elementwise_one(a, |x| x * cf, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let cf: T = cast(c);
        self.elementwise_one(a, |x| x + cf, Op::AddScalar { a })
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.elementwise_one(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.elementwise_one(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn ln(&mut self, a: ValueId) -> ValueId {
        self.elementwise_one(a, |x| x.ln(), Op::Ln { a })
    }

    pub fn sqrt(&mut self, a: ValueId) -> ValueId {
        self.elementwise_one(a, |x| x.sqrt(), Op::Sqrt { a })
    }

    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s: f64 = self.value(a).data().iter().map(|&x| to_f64(x)).sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(cast(s)), Op::SumAll { a }, tracked)
    }

    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = self.value(a).numel().max(1);
        let s: f64 = self.value(a).data().iter().map(|&x| to_f64(x)).sum();
        let tracked = self.tracked(a);
        self.push(
            Tensor::scalar(cast(s / n as f64)),
            Op::MeanAll { a },
            tracked,
        )
    }

    /// Per-row sum of a[n x m] down to a vector of length n.
    pub fn row_sum(&mut self, a: ValueId) -> Result<ValueId, TensorError> {
        let (n, m) = self.value(a).dims2("row_sum")?;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let s: f64 = src[i * m..(i + 1) * m].iter().map(|&x| to_f64(x)).sum();
            data.push(cast(s));
        }
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::vector(data), Op::RowSum { a }, tracked))
    }

    fn col_broadcast_check(
        &self,
        op: &'static str,
        a: ValueId,
        v: ValueId,
    ) -> Result<(usize, usize), TensorError> {
        let (n, m) = self.value(a).dims2(op)?;
        if self.value(v).shape() != [n] {
            return Err(TensorError::DimMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(v).shape().to_vec(),
            });
        }
        Ok((n, m))
    }

    /// out[i, j] = a[i, j] / v[i].
    pub fn div_col(&mut self, a: ValueId, v: ValueId) -> Result<ValueId, TensorError> {
        let (n, m) = self.col_broadcast_check("div_col", a, v)?;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(av[i * m + j] / vv[i]);
            }
        }
        let tracked = self.tracked(a) || self.tracked(v);
        Ok(self.push(Tensor::new(vec![n, m], data), Op::DivCol { a, v }, tracked))
    }

    /// out[i, j] = a[i, j] - v[i].
    pub fn sub_col(&mut self, a: ValueId, v: ValueId) -> Result<ValueId, TensorError> {
        let (n, m) = self.col_broadcast_check("sub_col", a, v)?;
        let av = self.value(a).data();
        let vv = self.value(v).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(av[i * m + j] - vv[i]);
            }
        }
        let tracked = self.tracked(a) || self.tracked(v);
        Ok(self.push(Tensor::new(vec![n, m], data), Op::SubCol { a, v }, tracked))
    }

    /// Main diagonal of a square matrix as a vector.
    pub fn diag(&mut self, a: ValueId) -> Result<ValueId, TensorError> {
        let (n, m) = self.value(a).dims2("diag")?;
        if n != m {
            return Err(TensorError::DimMismatch {
                op: "diag",
                lhs: vec![n, m],
                rhs: vec![n, n],
            });
        }
        let src = self.value(a).data();
        let data: Vec<T> = (0..n).map(|i| src[i * n + i]).collect();
        let tracked = self.tracked(a);
        Ok(self.push(Tensor::vector(data), Op::Diag { a }, tracked))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyBatch { op: "concat_cols" });
        }
        let (n, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(TensorError::RowMismatch {
                    op: "concat_cols",
                    lhs: n,
                    rhs: r,
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); n * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let src = self.value(p).data();
            for i in 0..n {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(
            Tensor::new(vec![n, total], data),
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            tracked,
        ))
    }

    /// Mean cross-entropy between rows of logits and integer labels.
    /// Stable log-sum-exp with the per-row maximum subtracted.
    pub fn cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &[u32],
    ) -> Result<ValueId, TensorError> {
        let (n, c) = self.value(logits).dims2("cross_entropy")?;
        if c < 2 {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("need at least 2 classes, got {c}"),
            ));
        }
        if labels.len() != n {
            return Err(TensorError::RowMismatch {
                op: "cross_entropy",
                lhs: n,
                rhs: labels.len(),
            });
        }
        if n == 0 {
            return Err(TensorError::EmptyBatch {
                op: "cross_entropy",
            });
        }
        for &y in labels {
            if y as usize >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
        }
        let src = self.value(logits).data();
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let sum_exp: f64 = row.iter().map(|&x| to_f64((x - mx).exp())).sum();
            total += to_f64(mx) + sum_exp.ln() - to_f64(row[y as usize]);
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(cast(total / n as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            tracked,
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Seeds the adjoint of a scalar node with one and propagates.
    pub fn backward(
        &mut self,
        loss: ValueId,
        store: &mut ParamStore<T>,
    ) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        self.backward_seeded(loss, Tensor::scalar(T::one()), store)
    }

    /// Propagates an externally supplied adjoint from `at` down the tape.
    /// Visits each recorded op at most once, in reverse record order.
    /// Parameter grads accumulate across calls; node adjoints are replaced.
    pub fn backward_seeded(
        &mut self,
        at: ValueId,
        seed: Tensor<T>,
        store: &mut ParamStore<T>,
    ) -> Result<(), TensorError> {
        if seed.shape() != self.value(at).shape() {
            return Err(TensorError::DimMismatch {
                op: "backward_seeded",
                lhs: seed.shape().to_vec(),
                rhs: self.value(at).shape().to_vec(),
            });
        }
        let nodes = &self.nodes;
        let mut adj: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        adj[at.0] = Some(seed.into_data());

        for i in (0..=at.0).rev() {
            if adj[i].is_none() || !nodes[i].tracked {
                continue;
            }
            let (lower, upper) = adj.split_at_mut(i);
            let g = upper[0].as_ref().expect("adjoint present");
            let node = &nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Matmul { a, b } => {
                    let (m, k) = nodes[a.0].value.dims2("matmul").expect("recorded shape");
                    let n = nodes[b.0].value.shape()[1];
                    if nodes[a.0].tracked {
                        let bv = nodes[b.0].value.data();
                        let da = ensure(&mut lower[a.0], m * k);
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let b_row = &bv[kk * n..(kk + 1) * n];
                                let mut acc = T::zero();
                                for (gq, bq) in g_row.iter().zip(b_row.iter()) {
                                    acc = acc + *gq * *bq;
                                }
                                da[r * k + kk] = da[r * k + kk] + acc;
                            }
                        }
                    }
                    if nodes[b.0].tracked {
                        let av = nodes[a.0].value.data();
                        let db = ensure(&mut lower[b.0], k * n);
                        for r in 0..m {
                            let g_row = &g[r * n..(r + 1) * n];
                            for kk in 0..k {
                                let a_rk = av[r * k + kk];
                                let db_row = &mut db[kk * n..(kk + 1) * n];
                                for (dq, gq) in db_row.iter_mut().zip(g_row.iter()) {
                                    *dq = *dq + a_rk * *gq;
                                }
                            }
                        }
                    }
                }
                Op::Transpose { a } => {
                    if nodes[a.0].tracked {
                        let (r, c) = nodes[a.0].value.dims2("transpose").expect("shape");
                        let da = ensure(&mut lower[a.0], r * c);
                        for i2 in 0..r {
                            for j2 in 0..c {
                                da[i2 * c + j2] = da[i2 * c + j2] + g[j2 * r + i2];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate_if_tracked(nodes, &mut lower[a.0], *a, g, T::one());
                    accumulate_if_tracked(nodes, &mut lower[b.0], *b, g, T::one());
                }
                Op::Sub { a, b } => {
                    accumulate_if_tracked(nodes, &mut lower[a.0], *a, g, T::one());
                    accumulate_if_tracked(nodes, &mut lower[b.0], *b, g, -T::one());
                }
                Op::Mul { a, b } => {
                    if nodes[a.0].tracked {
                        let bv = nodes[b.0].value.data().to_vec();
                        let da = ensure(&mut lower[a.0], g.len());
                        for ((d, gq), bq) in da.iter_mut().zip(g.iter()).zip(bv.iter()) {
                            *d = *d + *gq * *bq;
                        }
                    }
                    if nodes[b.0].tracked {
                        let av = nodes[a.0].value.data().to_vec();
                        let db = ensure(&mut lower[b.0], g.len());
                        for ((d, gq), aq) in db.iter_mut().zip(g.iter()).zip(av.iter()) {
                            *d = *d + *gq * *aq;
                        }
                    }
                }
                Op::AddRow { a, b } => {
                    let (n, m) = node.value.dims2("add_row").expect("shape");
                    accumulate_if_tracked(nodes, &mut lower[a.0], *a, g, T::one());
                    if nodes[b.0].tracked {
                        let db = ensure(&mut lower[b.0], m);
                        for j in 0..m {
                            let mut acc = 0.0f64;
                            for r in 0..n {
                                acc += to_f64(g[r * m + j]);
                            }
                            db[j] = db[j] + cast(acc);
                        }
                    }
                }
                Op::Scale { a, c } => {
                    accumulate_if_tracked(nodes, &mut lower[a.0], *a, g, cast(*c));
                }
                Op::AddScalar { a, .. } => {
                    accumulate_if_tracked(nodes, &mut lower[a.0], *a, g, T::one());
                }
                Op::Relu { a } => {
                    if nodes[a.0].tracked {
                        let av = nodes[a.0].value.data();
                        let da = ensure(&mut lower[a.0], g.len());
                        // Subgradient at exactly zero is zero.
                        for i2 in 0..g.len() {
                            if av[i2] > T::zero() {
                                da[i2] = da[i2] + g[i2];
                            }
                        }
                    }
                }
                Op::Exp { a } => {
                    if nodes[a.0].tracked {
                        let out = node.value.data();
                        let da = ensure(&mut lower[a.0], g.len());
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] * out[i2];
                        }
                    }
                }
                Op::Ln { a } => {
                    if nodes[a.0].tracked {
                        let av = nodes[a.0].value.data();
                        let da = ensure(&mut lower[a.0], g.len());
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] / av[i2];
                        }
                    }
                }
                Op::Sqrt { a } => {
                    if nodes[a.0].tracked {
                        let out = node.value.data();
                        let half: T = cast(0.5);
                        let da = ensure(&mut lower[a.0], g.len());
                        for i2 in 0..g.len() {
                            da[i2] = da[i2] + g[i2] * half / out[i2];
                        }
                    }
                }
                Op::SumAll { a } => {
                    if nodes[a.0].tracked {
                        let g0 = g[0];
                        let numel = nodes[a.0].value.numel();
                        let da = ensure(&mut lower[a.0], numel);
                        for d in da.iter_mut() {
                            *d = *d + g0;
                        }
                    }
                }
                Op::MeanAll { a } => {
                    if nodes[a.0].tracked {
                        let numel = nodes[a.0].value.numel();
                        let g0 = g[0] * cast(1.0 / numel as f64);
                        let da = ensure(&mut lower[a.0], numel);
                        for d in da.iter_mut() {
                            *d = *d + g0;
                        }
                    }
                }
                Op::RowSum { a } => {
                    if nodes[a.0].tracked {
                        let (n, m) = nodes[a.0].value.dims2("row_sum").expect("shape");
                        let da = ensure(&mut lower[a.0], n * m);
                        for r in 0..n {
                            let gr = g[r];
                            for j in 0..m {
                                da[r * m + j] = da[r * m + j] + gr;
                            }
                        }
                    }
                }
                Op::DivCol { a, v } => {
                    let (n, m) = nodes[a.0].value.dims2("div_col").expect("shape");
                    let vv = nodes[v.0].value.data().to_vec();
                    if nodes[a.0].tracked {
                        let da = ensure(&mut lower[a.0], n * m);
                        for r in 0..n {
                            let inv = T::one() / vv[r];
                            for j in 0..m {
                                da[r * m + j] = da[r * m + j] + g[r * m + j] * inv;
                            }
                        }
                    }
                    if nodes[v.0].tracked {
                        let av = nodes[a.0].value.data();
                        let dv = ensure(&mut lower[v.0], n);
                        for r in 0..n {
                            let mut acc = 0.0f64;
                            for j in 0..m {
                                acc += to_f64(g[r * m + j]) * to_f64(av[r * m + j]);
                            }
                            let vr = to_f64(vv[r]);
                            dv[r] = dv[r] + cast(-acc / (vr * vr));
                        }
                    }
                }
                Op::SubCol { a, v } => {
                    let (n, m) = nodes[a.0].value.dims2("sub_col").expect("shape");
                    accumulate_if_tracked(nodes, &mut lower[a.0], *a, g, T::one());
                    if nodes[v.0].tracked {
                        let dv = ensure(&mut lower[v.0], n);
                        for r in 0..n {
                            let mut acc = 0.0f64;
                            for j in 0..m {
                                acc += to_f64(g[r * m + j]);
                            }
                            dv[r] = dv[r] - cast(acc);
                        }
                    }
                }
                Op::Diag { a } => {
                    if nodes[a.0].tracked {
                        let n = nodes[a.0].value.shape()[0];
                        let da = ensure(&mut lower[a.0], n * n);
                        for r in 0..n {
                            da[r * n + r] = da[r * n + r] + g[r];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let (n, total) = node.value.dims2("concat_cols").expect("shape");
                    let widths: Vec<usize> =
                        parts.iter().map(|p| nodes[p.0].value.shape()[1]).collect();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(widths.iter()) {
                        if nodes[p.0].tracked {
                            let dp = ensure(&mut lower[p.0], n * w);
                            for r in 0..n {
                                for j in 0..w {
                                    dp[r * w + j] =
                                        dp[r * w + j] + g[r * total + offset + j];
                                }
                            }
                        }
                        offset += w;
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    if nodes[logits.0].tracked {
                        let (n, c) = nodes[logits.0].value.dims2("ce").expect("shape");
                        let src = nodes[logits.0].value.data();
                        let g0 = to_f64(g[0]) / n as f64;
                        let dl = ensure(&mut lower[logits.0], n * c);
                        for (r, &y) in labels.iter().enumerate() {
                            let row = &src[r * c..(r + 1) * c];
                            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                            let mut sum_exp = 0.0f64;
                            for &x in row {
                                sum_exp += to_f64((x - mx).exp());
                            }
                            for j in 0..c {
                                let sm = to_f64((row[j] - mx).exp()) / sum_exp;
                                let onehot = if j == y as usize { 1.0 } else { 0.0 };
                                dl[r * c + j] = dl[r * c + j] + cast(g0 * (sm - onehot));
                            }
                        }
                    }
                }
            }
        }

        // Deposit parameter adjoints.
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &adj[i]) {
                store.add_grad(*pid, g);
            }
        }
        self.adjoints = adj;
        Ok(())
    }
}

fn ensure<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

fn accumulate_if_tracked<T: Scalar>(
    nodes: &[Node<T>],
    slot: &mut Option<Vec<T>>,
    id: ValueId,
    g: &[T],
    factor: T,
) {
    if nodes[id.0].tracked {
        let d = ensure(slot, g.len());
        for (dq, gq) in d.iter_mut().zip(g.iter()) {
            *dq = *dq + factor * *gq;
        }
    }
}

//! Multi-layer perceptrons over the tape engine.

use rand_core::RngCore;

use crate::error::TensorError;
use crate::rng;
use crate::scalar::{cast, Scalar};
use crate::tape::{ParamId, ParamStore, Tape, ValueId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Layer widths `[in, h1, ..., out]` plus one activation per affine layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self, TensorError> {
        if widths.len() < 2 {
            return Err(TensorError::contract(
                "mlp_spec",
                format!("need at least one layer, got widths {widths:?}"),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(TensorError::contract(
                "mlp_spec",
                format!("zero width in {widths:?}"),
            ));
        }
        if activations.len() != widths.len() - 1 {
            return Err(TensorError::contract(
                "mlp_spec",
                format!(
                    "{} activations for {} layers",
                    activations.len(),
                    widths.len() - 1
                ),
            ));
        }
        Ok(MlpSpec {
            widths,
            activations,
        })
    }

    /// Relu after every affine layer (representation encoders).
    pub fn relu_all(widths: Vec<usize>) -> Result<Self, TensorError> {
        let acts = vec![Activation::Relu; widths.len().saturating_sub(1)];
        MlpSpec::new(widths, acts)
    }

    /// Relu on hidden layers, identity on the last (heads and decoders).
    pub fn linear_out(widths: Vec<usize>) -> Result<Self, TensorError> {
        let n = widths.len().saturating_sub(1);
        let mut acts = vec![Activation::Relu; n];
        if let Some(last) = acts.last_mut() {
            *last = Activation::Identity;
        }
        MlpSpec::new(widths, acts)
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

/// An MLP whose parameters live in a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Creates parameters named `{prefix}.l{i}.w` / `{prefix}.l{i}.b`.
    /// Weights draw from uniform [-1/sqrt(fan_in), 1/sqrt(fan_in)];
    /// biases start at zero.
    pub fn init<T: Scalar, R: RngCore>(
        store: &mut ParamStore<T>,
        spec: MlpSpec,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for l in 0..spec.widths.len() - 1 {
            let fan_in = spec.widths[l];
            let fan_out = spec.widths[l + 1];
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data: Vec<T> = (0..fan_in * fan_out)
                .map(|_| cast(rng::uniform(rng, -bound, bound)))
                .collect();
            let w = store.add(
                format!("{prefix}.l{l}.w"),
                Tensor::new(vec![fan_in, fan_out], data),
            );
            let b = store.add(
                format!("{prefix}.l{l}.b"),
                Tensor::zeros(vec![fan_out]),
            );
            layers.push((w, b));
        }
        Mlp { spec, layers }
    }

    /// Rebinds a spec to parameters already present in the store (e.g. after
    /// loading a checkpoint). Fails if any named tensor is missing or has
    /// the wrong shape.
    pub fn bind<T: Scalar>(
        store: &ParamStore<T>,
        spec: MlpSpec,
        prefix: &str,
    ) -> Result<Self, TensorError> {
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for l in 0..spec.widths.len() - 1 {
            let wname = format!("{prefix}.l{l}.w");
            let bname = format!("{prefix}.l{l}.b");
            let w = store.find(&wname).ok_or_else(|| {
                TensorError::contract("mlp_bind", format!("missing parameter {wname}"))
            })?;
            let b = store.find(&bname).ok_or_else(|| {
                TensorError::contract("mlp_bind", format!("missing parameter {bname}"))
            })?;
            if store.value(w).shape() != [spec.widths[l], spec.widths[l + 1]] {
                return Err(TensorError::DimMismatch {
                    op: "mlp_bind",
                    lhs: store.value(w).shape().to_vec(),
                    rhs: vec![spec.widths[l], spec.widths[l + 1]],
                });
            }
            layers.push((w, b));
        }
        Ok(Mlp { spec, layers })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Records the forward pass on the tape: affine then activation per
    /// layer. The input must be rank-2 with width equal to the first spec
    /// width.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: ValueId,
    ) -> Result<ValueId, TensorError> {
        let (_, width) = tape.value(x).dims2("mlp_forward")?;
        if width != self.spec.in_dim() {
            return Err(TensorError::DimMismatch {
                op: "mlp_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![tape.value(x).shape()[0], self.spec.in_dim()],
            });
        }
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.affine(h, wv, bv)?;
            if self.spec.activations[l] == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Tape-free forward evaluation for inference.
    pub fn eval<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>, TensorError> {
        let (n, width) = x.dims2("mlp_eval")?;
        if width != self.spec.in_dim() {
            return Err(TensorError::DimMismatch {
                op: "mlp_eval",
                lhs: x.shape().to_vec(),
                rhs: vec![n, self.spec.in_dim()],
            });
        }
        let mut h = x.clone();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wt = store.value(w);
            let bt = store.value(b);
            let (rows, k) = h.dims2("mlp_eval")?;
            let out_dim = wt.shape()[1];
            let mut out = Tensor::zeros(vec![rows, out_dim]);
            crate::tensor::matmul_into(out.data_mut(), h.data(), wt.data(), rows, k, out_dim);
            let od = out.data_mut();
            let bd = bt.data();
            for r in 0..rows {
                for j in 0..out_dim {
                    od[r * out_dim + j] = od[r * out_dim + j] + bd[j];
                }
            }
            if self.spec.activations[l] == Activation::Relu {
                for v in od.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            h = out;
        }
        Ok(h)
    }
}

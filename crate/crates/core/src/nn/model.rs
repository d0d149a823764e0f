//! Multi-head MLP with exact reverse-mode gradients.
//!
//! Layout: `trunk_depth` hidden trunk layers, then `shared_head_layers` hidden
//! head layers shared by every task, then per task `head_depth -
//! shared_head_layers` private hidden layers and one linear output layer.
//!
//! All parameters live in one flat buffer in canonical order: layers in the
//! order trunk, shared head, head 0, head 1, ...; inside a layer the row-major
//! `out x in` weight matrix comes first, then the bias vector. Gradients
//! returned by [`Model::backward`] use the same order.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Capacity knobs: trunk depth, width multiplier and head sharing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Capacity {
    pub trunk_depth: usize,
    pub base_width: usize,
    pub width_multiplier: f64,
    #[serde(default)]
    pub head_depth: usize,
    #[serde(default)]
    pub shared_head_layers: usize,
}

impl Capacity {
    pub fn hidden_width(&self) -> usize {
        ((self.base_width as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_depth == 0 {
            return Err(Error::config("trunk_depth must be positive"));
        }
        if self.base_width == 0 {
            return Err(Error::config("base_width must be positive"));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::config("width_multiplier must be a positive number"));
        }
        if self.shared_head_layers > self.head_depth {
            return Err(Error::config(format!(
                "shared_head_layers ({}) exceeds head_depth ({})",
                self.shared_head_layers, self.head_depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub capacity: Capacity,
    /// Output dimension of each task head.
    pub head_outputs: Vec<usize>,
    pub activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.capacity.validate()?;
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.head_outputs.is_empty() || self.head_outputs.contains(&0) {
            return Err(Error::config("every model needs at least one head with a positive output dim"));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> (Vec<(usize, usize, Activation)>, usize, Vec<usize>) {
        let width = self.capacity.hidden_width();
        let act = self.activation;
        let mut shapes = Vec::new();
        let mut dim = self.input_dim;
        for _ in 0..self.capacity.trunk_depth {
            shapes.push((dim, width, act));
            dim = width;
        }
        for _ in 0..self.capacity.shared_head_layers {
            shapes.push((dim, width, act));
        }
        let shared_len = shapes.len();
        let private = self.capacity.head_depth - self.capacity.shared_head_layers;
        let mut head_lens = Vec::with_capacity(self.head_outputs.len());
        for &out in &self.head_outputs {
            for _ in 0..private {
                shapes.push((width, width, act));
            }
            shapes.push((width, out, Activation::Identity));
            head_lens.push(private + 1);
        }
        (shapes, shared_len, head_lens)
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .0
            .iter()
            .map(|(i, o, _)| i * o + o)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerDesc {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    offset: usize,
}

impl LayerDesc {
    fn weights_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    fn len(&self) -> usize {
        self.weights_len() + self.out_dim
    }
}

/// Position of one layer inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    layers: Vec<LayerDesc>,
    shared_len: usize,
    heads: Vec<Vec<usize>>,
    params: Vec<f64>,
    version: u64,
}

/// Activations recorded along a chain of layers.
#[derive(Debug, Clone)]
struct Segment {
    layers: Vec<usize>,
    inputs: Vec<Matrix>,
    outputs: Vec<Matrix>,
}

/// Record of one single-head forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    param_count: usize,
    head: usize,
    shared: Segment,
    private: Segment,
}

impl Tape {
    pub fn head(&self) -> usize {
        self.head
    }

    pub fn output(&self) -> &Matrix {
        self.private.outputs.last().expect("heads have at least one layer")
    }
}

/// Record of a forward pass sharing one trunk evaluation across several heads.
#[derive(Debug, Clone)]
pub struct MultiTape {
    version: u64,
    param_count: usize,
    shared: Segment,
    heads: Vec<(usize, Segment)>,
}

impl MultiTape {
    pub fn heads(&self) -> impl Iterator<Item = usize> + '_ {
        self.heads.iter().map(|(h, _)| *h)
    }
}

impl Model {
    /// He-style uniform fan-in initialization (`U(-sqrt(6/fan_in), sqrt(6/fan_in))`), zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &model.layers {
            let limit = (6.0 / l.in_dim as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut model.params[l.offset..l.offset + l.weights_len()] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(model)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (shapes, shared_len, head_lens) = arch.layer_shapes();
        let mut layers = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (in_dim, out_dim, activation) in shapes {
            let l = LayerDesc {
                in_dim,
                out_dim,
                activation,
                offset,
            };
            offset += l.len();
            layers.push(l);
        }
        let mut heads = Vec::with_capacity(head_lens.len());
        let mut next = shared_len;
        for len in head_lens {
            heads.push((next..next + len).collect());
            next += len;
        }
        Ok(Self {
            arch,
            layers,
            shared_len,
            heads,
            params: vec![0.0; offset],
            version: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access to the parameters. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Dimension {
                context: "parameter vector",
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params_mut().copy_from_slice(params);
        Ok(())
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let trunk = self.arch.capacity.trunk_depth;
        let mut names = Vec::with_capacity(self.layers.len());
        for i in 0..self.shared_len {
            if i < trunk {
                names.push(format!("trunk.{i}"));
            } else {
                names.push(format!("shared_head.{}", i - trunk));
            }
        }
        for (h, layers) in self.heads.iter().enumerate() {
            for k in 0..layers.len() {
                if k + 1 == layers.len() {
                    names.push(format!("head.{h}.out"));
                } else {
                    names.push(format!("head.{h}.{k}"));
                }
            }
        }
        self.layers
            .iter()
            .zip(names)
            .map(|(l, name)| LayerLayout {
                name,
                in_dim: l.in_dim,
                out_dim: l.out_dim,
                weight_offset: l.offset,
                bias_offset: l.offset + l.weights_len(),
            })
            .collect()
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.arch.input_dim {
            return Err(Error::Dimension {
                context: "forward inputs",
                expected: self.arch.input_dim,
                actual: inputs.cols(),
            });
        }
        Ok(())
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.heads.len() {
            return Err(Error::UnknownTask {
                task: head,
                heads: self.heads.len(),
            });
        }
        Ok(())
    }

    fn layer_forward(&self, l: &LayerDesc, input: &Matrix) -> Matrix {
        let w = &self.params[l.offset..l.offset + l.weights_len()];
        let b = &self.params[l.offset + l.weights_len()..l.offset + l.len()];
        let mut out = Matrix::zeros(input.rows(), l.out_dim);
        for i in 0..input.rows() {
            let x = input.row(i);
            let y = out.row_mut(i);
            for (o, yo) in y.iter_mut().enumerate() {
                let wr = &w[o * l.in_dim..(o + 1) * l.in_dim];
                let mut acc = b[o];
                for (wk, xk) in wr.iter().zip(x) {
                    acc += wk * xk;
                }
                *yo = l.activation.apply(acc);
            }
        }
        out
    }

    fn forward_segment(&self, layers: &[usize], input: Matrix) -> (Matrix, Segment) {
        let mut inputs = Vec::with_capacity(layers.len());
        let mut outputs = Vec::with_capacity(layers.len());
        let mut current = input;
        for &li in layers {
            let out = self.layer_forward(&self.layers[li], &current);
            inputs.push(current);
            outputs.push(out.clone());
            current = out;
        }
        (
            current,
            Segment {
                layers: layers.to_vec(),
                inputs,
                outputs,
            },
        )
    }

    /// Backpropagates `delta` (gradient w.r.t. the segment output) through the
    /// segment, accumulating into `grad`. Returns the gradient w.r.t. the
    /// segment input when `need_input_grad` is set.
    fn backward_segment(
        &self,
        seg: &Segment,
        mut delta: Matrix,
        grad: &mut [f64],
        need_input_grad: bool,
    ) -> Option<Matrix> {
        for k in (0..seg.layers.len()).rev() {
            let l = &self.layers[seg.layers[k]];
            let input = &seg.inputs[k];
            let output = &seg.outputs[k];
            if l.activation != Activation::Identity {
                for (d, y) in delta.as_mut_slice().iter_mut().zip(output.as_slice()) {
                    *d *= l.activation.derivative_from_output(*y);
                }
            }
            let (gw, rest) = grad[l.offset..l.offset + l.len()].split_at_mut(l.weights_len());
            for i in 0..delta.rows() {
                let d = delta.row(i);
                let x = input.row(i);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    rest[o] += dv;
                    let row = &mut gw[o * l.in_dim..(o + 1) * l.in_dim];
                    for (g, xk) in row.iter_mut().zip(x) {
                        *g += dv * xk;
                    }
                }
            }
            if k == 0 && !need_input_grad {
                return None;
            }
            let w = &self.params[l.offset..l.offset + l.weights_len()];
            let mut prev = Matrix::zeros(delta.rows(), l.in_dim);
            for i in 0..delta.rows() {
                let d = delta.row(i);
                let p = prev.row_mut(i);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    let wr = &w[o * l.in_dim..(o + 1) * l.in_dim];
                    for (pk, wk) in p.iter_mut().zip(wr) {
                        *pk += dv * wk;
                    }
                }
            }
            delta = prev;
        }
        Some(delta)
    }

    /// Runs `inputs` through the trunk and the given task head.
    pub fn forward(&self, inputs: &Matrix, head: usize) -> Result<(Matrix, Tape)> {
        self.check_inputs(inputs)?;
        self.check_head(head)?;
        let shared_layers: Vec<usize> = (0..self.shared_len).collect();
        let (hidden, shared) = self.forward_segment(&shared_layers, inputs.clone());
        let (out, private) = self.forward_segment(&self.heads[head], hidden);
        Ok((
            out,
            Tape {
                version: self.version,
                param_count: self.params.len(),
                head,
                shared,
                private,
            },
        ))
    }

    /// Evaluates the trunk once and every requested head on the same inputs.
    pub fn forward_heads(&self, inputs: &Matrix, heads: &[usize]) -> Result<(Vec<Matrix>, MultiTape)> {
        self.check_inputs(inputs)?;
        for &h in heads {
            self.check_head(h)?;
        }
        let shared_layers: Vec<usize> = (0..self.shared_len).collect();
        let (hidden, shared) = self.forward_segment(&shared_layers, inputs.clone());
        let mut outs = Vec::with_capacity(heads.len());
        let mut segs = Vec::with_capacity(heads.len());
        for &h in heads {
            let (out, seg) = self.forward_segment(&self.heads[h], hidden.clone());
            outs.push(out);
            segs.push((h, seg));
        }
        Ok((
            outs,
            MultiTape {
                version: self.version,
                param_count: self.params.len(),
                shared,
                heads: segs,
            },
        ))
    }

    fn check_tape(&self, version: u64, param_count: usize) -> Result<()> {
        if param_count != self.params.len() {
            return Err(Error::StaleTape("tape was recorded on a different architecture"));
        }
        if version != self.version {
            return Err(Error::StaleTape("parameters changed since the forward pass"));
        }
        Ok(())
    }

    /// Gradient of the scalar batch loss w.r.t. every parameter, given the
    /// gradient of that loss w.r.t. the head outputs.
    pub fn backward(&self, tape: &Tape, loss_grad: &Matrix) -> Result<Vec<f64>> {
        self.check_tape(tape.version, tape.param_count)?;
        let out = tape.output();
        if loss_grad.rows() != out.rows() || loss_grad.cols() != out.cols() {
            return Err(Error::Dimension {
                context: "loss gradient",
                expected: out.rows() * out.cols(),
                actual: loss_grad.rows() * loss_grad.cols(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let delta = self
            .backward_segment(&tape.private, loss_grad.clone(), &mut grad, true)
            .expect("input gradient requested");
        self.backward_segment(&tape.shared, delta, &mut grad, false);
        Ok(grad)
    }

    /// Backward pass for [`Model::forward_heads`]; `loss_grads[k]` belongs to
    /// the `k`-th head of the tape. Head contributions to the shared layers are
    /// summed in head order before a single trunk backward pass.
    pub fn backward_heads(&self, tape: &MultiTape, loss_grads: &[Matrix]) -> Result<Vec<f64>> {
        self.check_tape(tape.version, tape.param_count)?;
        if loss_grads.len() != tape.heads.len() {
            return Err(Error::Dimension {
                context: "per-head loss gradients",
                expected: tape.heads.len(),
                actual: loss_grads.len(),
            });
        }
        let mut grad = vec![0.0; self.params.len()];
        let mut shared_delta: Option<Matrix> = None;
        for ((_, seg), g) in tape.heads.iter().zip(loss_grads) {
            let out = seg.outputs.last().expect("non-empty head");
            if g.rows() != out.rows() || g.cols() != out.cols() {
                return Err(Error::Dimension {
                    context: "loss gradient",
                    expected: out.rows() * out.cols(),
                    actual: g.rows() * g.cols(),
                });
            }
            let d = self
                .backward_segment(seg, g.clone(), &mut grad, true)
                .expect("input gradient requested");
            match shared_delta.as_mut() {
                None => shared_delta = Some(d),
                Some(acc) => {
                    for (a, v) in acc.as_mut_slice().iter_mut().zip(d.as_slice()) {
                        *a += v;
                    }
                }
            }
        }
        if let Some(d) = shared_delta {
            self.backward_segment(&tape.shared, d, &mut grad, false);
        }
        Ok(grad)
    }

    /// Inference-only forward pass.
    pub fn predict(&self, inputs: &Matrix, head: usize) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        self.check_head(head)?;
        let mut current = inputs.clone();
        for li in (0..self.shared_len).chain(self.heads[head].iter().copied()) {
            current = self.layer_forward(&self.layers[li], &current);
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(trunk_depth: usize, width: usize, act: Activation) -> Architecture {
        Architecture {
            input_dim: 3,
            capacity: Capacity {
                trunk_depth,
                base_width: width,
                width_multiplier: 1.0,
                head_depth: 0,
                shared_head_layers: 0,
            },
            head_outputs: vec![2],
            activation: act,
        }
    }

    #[test]
    fn identity_model_passes_input_through() {
        let a = Architecture {
            input_dim: 2,
            capacity: Capacity {
                trunk_depth: 1,
                base_width: 2,
                width_multiplier: 1.0,
                head_depth: 0,
                shared_head_layers: 0,
            },
            head_outputs: vec![2],
            activation: Activation::Identity,
        };
        let mut m = Model::zeros(a).unwrap();
        let layout = m.layout();
        let p = m.params_mut();
        for l in &layout {
            for d in 0..2 {
                p[l.weight_offset + d * 2 + d] = 1.0;
            }
        }
        let x = Matrix::from_rows(&[[0.5, -2.0], [3.0, 7.25]]).unwrap();
        let (y, _) = m.forward(&x, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_model_outputs_zero() {
        let m = Model::zeros(arch(2, 4, Activation::Relu)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (y, _) = m.forward(&x, 0).unwrap();
        assert!(y.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let m = Model::zeros(arch(1, 4, Activation::Relu)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(matches!(m.forward(&x, 0), Err(Error::Dimension { .. })));
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        assert!(matches!(m.forward(&x, 1), Err(Error::UnknownTask { task: 1, heads: 1 })));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut m = Model::new(arch(1, 4, Activation::Tanh), 3).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let (y, tape) = m.forward(&x, 0).unwrap();
        m.params_mut()[0] += 1.0;
        assert!(matches!(m.backward(&tape, &y), Err(Error::StaleTape(_))));
    }

    #[test]
    fn hand_chain_rule_on_scalar_chain() {
        // y = w2 * (w1 * x); L = (y - t)^2 with w1 = w2 = 1, x = 2, t = 0.
        let a = Architecture {
            input_dim: 1,
            capacity: Capacity {
                trunk_depth: 1,
                base_width: 1,
                width_multiplier: 1.0,
                head_depth: 0,
                shared_head_layers: 0,
            },
            head_outputs: vec![1],
            activation: Activation::Identity,
        };
        let mut m = Model::zeros(a).unwrap();
        m.set_params(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        let x = Matrix::from_rows(&[[2.0]]).unwrap();
        let (y, tape) = m.forward(&x, 0).unwrap();
        let dl_dy = Matrix::from_rows(&[[2.0 * y.get(0, 0)]]).unwrap();
        let g = m.backward(&tape, &dl_dy).unwrap();
        assert_eq!(g[0], 8.0);
        assert_eq!(g[2], 8.0);
    }

    #[test]
    fn squared_loss_at_zero_weights_and_target_is_stationary() {
        let m = Model::zeros(arch(2, 3, Activation::Identity)).unwrap();
        let x = Matrix::from_rows(&[[1.0, -1.0, 0.5]]).unwrap();
        let (y, tape) = m.forward(&x, 0).unwrap();
        let mut dl = y.clone();
        dl.scale(2.0);
        let g = m.backward(&tape, &dl).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn parameter_count_and_layout_agree() {
        let a = Architecture {
            input_dim: 5,
            capacity: Capacity {
                trunk_depth: 2,
                base_width: 8,
                width_multiplier: 0.5,
                head_depth: 2,
                shared_head_layers: 1,
            },
            head_outputs: vec![3, 1],
            activation: Activation::Relu,
        };
        // width 4: trunk 5*4+4, 4*4+4; shared 4*4+4; per head 4*4+4 + 4*out+out
        let expected = 24 + 20 + 20 + (20 + 15) + (20 + 5);
        assert_eq!(a.param_count(), expected);
        let m = Model::zeros(a).unwrap();
        assert_eq!(m.param_count(), expected);
        let layout = m.layout();
        let names: Vec<_> = layout.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(
            names,
            ["trunk.0", "trunk.1", "shared_head.0", "head.0.0", "head.0.out", "head.1.0", "head.1.out"]
        );
        for pair in layout.windows(2) {
            assert_eq!(pair[0].bias_offset + pair[0].out_dim, pair[1].weight_offset);
        }
    }

    #[test]
    fn forward_heads_matches_single_head_forward_bitwise() {
        let a = Architecture {
            input_dim: 3,
            capacity: Capacity {
                trunk_depth: 2,
                base_width: 5,
                width_multiplier: 1.0,
                head_depth: 1,
                shared_head_layers: 0,
            },
            head_outputs: vec![2, 3],
            activation: Activation::Tanh,
        };
        let m = Model::new(a, 11).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3], [-1.0, 0.5, 2.0]]).unwrap();
        let (outs, mt) = m.forward_heads(&x, &[1]).unwrap();
        let (y, t) = m.forward(&x, 1).unwrap();
        assert_eq!(outs[0], y);
        let g = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.25, 0.0, 3.0]]).unwrap();
        assert_eq!(
            m.backward_heads(&mt, std::slice::from_ref(&g)).unwrap(),
            m.backward(&t, &g).unwrap()
        );
        assert_eq!(m.predict(&x, 1).unwrap(), y);
    }
}

//! Reverse-mode differentiation tape.
//!
//! Every recorded op stores its output value plus a backward closure that
//! maps the output adjoint to adjoints of its parents. Replaying the closures
//! in reverse order yields a gradient for every leaf marked trainable;
//! gradients always match the shape of the value they belong to.
//!
//! The tape is single-owner: one trainer, one tape. Ops validate their
//! results are finite before the node is committed.

use crate::error::{Error, Result};
use crate::ops::{self, BnSaved, BnState, Mode, Padding, PoolKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type Backward<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(usize, Tensor<T>)>>;

struct Node<T> {
    value: Tensor<T>,
    trainable: bool,
    backward: Option<Backward<T>>,
}

pub struct GradTape<T = f64> {
    nodes: Vec<Node<T>>,
}

/// Result of a backward pass: one optional gradient per tape node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    trainable: Vec<bool>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a leaf. Frozen (non-trainable) leaves report no gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if !self.trainable[v.0] {
            return None;
        }
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            trainable,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, backward: Backward<T>) -> Result<Var> {
        value.check_finite(op)?;
        self.nodes.push(Node {
            value,
            trainable: false,
            backward: Some(backward),
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // -- ops ---------------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(
            "add",
            value,
            Box::new(move |g| vec![(a.0, g.clone()), (b.0, g.clone())]),
        )
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let value = self.value(a).scale(s);
        self.push(
            "scale",
            value,
            Box::new(move |g| vec![(a.0, g.scale(s))]),
        )
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let x = self.value(input).clone();
        let k = self.value(kernel).clone();
        let b = bias.map(|bv| self.value(bv).clone());
        let value = ops::conv2d_forward(&x, &k, b.as_ref(), stride, pad)?;
        self.push(
            "conv2d",
            value,
            Box::new(move |g| {
                let (dx, dk, db) = ops::conv2d_backward(&x, &k, g, stride, pad)
                    .expect("conv2d backward shape checked at record time");
                let mut out = vec![(input.0, dx), (kernel.0, dk)];
                if let Some(bv) = bias {
                    out.push((bv.0, db));
                }
                out
            }),
        )
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState<T>,
        mode: Mode,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let x = self.value(input).clone();
        let g = self.value(gamma).clone();
        let (value, saved): (Tensor<T>, BnSaved<T>) =
            ops::batchnorm_forward(&x, &g, self.value(beta), state, mode, momentum, eps)?;
        self.push(
            "batch_norm",
            value,
            Box::new(move |gout| {
                let (dx, dg, db) = ops::batchnorm_backward(&x, &g, &saved, gout, mode, eps)
                    .expect("batch_norm backward shape checked at record time");
                vec![(input.0, dx), (gamma.0, dg), (beta.0, db)]
            }),
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).clone();
        let value = ops::relu_forward(&x);
        self.push(
            "relu",
            value,
            Box::new(move |g| vec![(input.0, ops::relu_backward(&x, g))]),
        )
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let value = ops::sigmoid_forward(self.value(input));
        let out = value.clone();
        self.push(
            "sigmoid",
            value,
            Box::new(move |g| vec![(input.0, ops::sigmoid_backward(&out, g))]),
        )
    }

    pub fn downsample2(&mut self, input: Var, kind: PoolKind) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let (value, argmax) = ops::downsample2_forward(self.value(input), kind)?;
        self.push(
            "downsample2",
            value,
            Box::new(move |g| {
                vec![(input.0, ops::downsample2_backward(&shape, kind, &argmax, g))]
            }),
        )
    }

    pub fn upsample2(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let value = ops::upsample2_forward(self.value(input))?;
        self.push(
            "upsample2",
            value,
            Box::new(move |g| vec![(input.0, ops::upsample2_backward(&shape, g))]),
        )
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let c1 = self.value(a).shape()[0];
        let value = ops::concat_channels(self.value(a), self.value(b))?;
        let ctot = value.shape()[0];
        self.push(
            "concat_channels",
            value,
            Box::new(move |g| {
                let ga = ops::slice_channels(g, 0, c1).expect("split of concat");
                let gb = ops::slice_channels(g, c1, ctot).expect("split of concat");
                vec![(a.0, ga), (b.0, gb)]
            }),
        )
    }

    pub fn slice_channels(&mut self, input: Var, from: usize, to: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let value = ops::slice_channels(self.value(input), from, to)?;
        self.push(
            "slice_channels",
            value,
            Box::new(move |g| {
                let mut dx = Tensor::zeros(&shape);
                let m = shape[1] * shape[2];
                dx.data_mut()[from * m..to * m].copy_from_slice(g.data());
                vec![(input.0, dx)]
            }),
        )
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let orig = self.value(input).shape().to_vec();
        let value = self.value(input).reshape(shape)?;
        self.push(
            "reshape",
            value,
            Box::new(move |g| {
                vec![(input.0, g.reshape(orig.clone()).expect("reshape grad"))]
            }),
        )
    }

    pub fn transpose2(&mut self, input: Var) -> Result<Var> {
        let value = ops::transpose2(self.value(input))?;
        self.push(
            "transpose2",
            value,
            Box::new(move |g| vec![(input.0, ops::transpose2(g).expect("transpose grad"))]),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = ops::matmul(&av, &bv)?;
        self.push(
            "matmul",
            value,
            Box::new(move |g| {
                let bt = ops::transpose2(&bv).expect("transpose");
                let at = ops::transpose2(&av).expect("transpose");
                let da = ops::matmul(g, &bt).expect("matmul grad a");
                let db = ops::matmul(&at, g).expect("matmul grad b");
                vec![(a.0, da), (b.0, db)]
            }),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let c1 = self.value(a).shape()[1];
        let value = ops::concat_cols(self.value(a), self.value(b))?;
        self.push(
            "concat_cols",
            value,
            Box::new(move |g| {
                let (ga, gb) = ops::split_cols(g, c1).expect("split of concat_cols");
                vec![(a.0, ga), (b.0, gb)]
            }),
        )
    }

    pub fn row_softmax(&mut self, input: Var) -> Result<Var> {
        let value = ops::row_softmax_forward(self.value(input))?;
        let beta = value.clone();
        self.push(
            "row_softmax",
            value,
            Box::new(move |g| vec![(input.0, ops::row_softmax_backward(&beta, g))]),
        )
    }

    pub fn mean_channels(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        let value = ops::mean_channels_forward(self.value(input))?;
        self.push(
            "cam_pool",
            value,
            Box::new(move |g| vec![(input.0, ops::mean_channels_backward(&shape, g))]),
        )
    }

    pub fn channel_scale(&mut self, input: Var, weights: Var) -> Result<Var> {
        let x = self.value(input).clone();
        let w = self.value(weights).clone();
        let value = ops::channel_scale_forward(&x, &w)?;
        self.push(
            "channel_scale",
            value,
            Box::new(move |g| {
                let (dx, dw) = ops::channel_scale_backward(&x, &w, g);
                vec![(input.0, dx), (weights.0, dw)]
            }),
        )
    }

    /// Subspace projector P = V (V^T V + eps I)^-1 V^T with the adjoint of
    /// the SPD solve, so gradient flows through P.
    pub fn ortho_project(&mut self, v: Var, eps_reg: T) -> Result<Var> {
        let vv = self.value(v).clone();
        let (value, m) = ops::ortho_project_forward(&vv, eps_reg)?;
        let p = value.clone();
        self.push(
            "orth_project",
            value,
            Box::new(move |g| {
                let dv = ops::ortho_project_backward(&vv, &p, &m, g, eps_reg)
                    .expect("orth_project backward");
                vec![(v.0, dv)]
            }),
        )
    }

    /// MSE loss as a scalar node.
    pub fn mse(&mut self, rec: Var, gt: Var) -> Result<Var> {
        let rv = self.value(rec).clone();
        let gv = self.value(gt).clone();
        let value = Tensor::scalar(ops::mse_forward(&rv, &gv)?);
        self.push(
            "mse_loss",
            value,
            Box::new(move |g| {
                let gscale = g.data()[0];
                let (dr, dg) = ops::mse_backward(&rv, &gv, gscale);
                vec![(rec.0, dr), (gt.0, dg)]
            }),
        )
    }

    // -- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!(
                    "root must be scalar, has shape {:?}",
                    self.nodes[root.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Some(bw) = &self.nodes[i].backward {
                for (pid, pg) in bw(&g) {
                    debug_assert_eq!(pg.shape(), self.nodes[pid].value.shape());
                    match &mut grads[pid] {
                        Some(acc) => *acc = acc.add(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            trainable: self.nodes.iter().map(|n| n.trainable).collect(),
        })
    }
}

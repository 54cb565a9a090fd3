//! Minimal reverse-mode autodiff: a flat tape of tensor nodes.
//!
//! A `Graph` records every operation as it executes forward; `backward`
//! walks the tape in reverse, accumulating gradients. Node ids are tape
//! indices, so reverse id order is already a valid topological order.

use crate::error::{Error, Result};

use super::ops::{conv_out_len, gather_conv, scatter_conv, weight_grad};

/// Plain shape + data value, the unit parameters and gradients travel in.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} values for {:?}", shape.iter().product::<usize>(), shape),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Deconv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Relu {
        x: NodeId,
    },
    ScaledSigmoid {
        x: NodeId,
        scale: f64,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Square {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    AddWeighted {
        a: NodeId,
        b: NodeId,
        wa: f64,
        wb: f64,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// The tape. Build nodes forward, then call `backward` on a scalar loss.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { op, shape, data });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        self.push(Op::Leaf, tensor.shape.clone(), tensor.data.clone())
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient of the last `backward` target with respect to node `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).map(|g| g.as_slice())
    }

    fn chw(&self, id: NodeId) -> Result<(usize, usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [c, h, w] => Ok((c, h, w)),
            ref s => Err(Error::ShapeMismatch {
                expected: "rank-3 tensor [c, h, w]".into(),
                actual: format!("{s:?}"),
            }),
        }
    }

    /// Convolution: x [ci, h, w], weights [co, ci, kh, kw], bias [co].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let (ci, h, wd) = self.chw(x)?;
        let wshape = self.nodes[w.0].shape.clone();
        let [co, wci, kh, kw] = wshape[..] else {
            return Err(Error::ShapeMismatch {
                expected: "rank-4 weights [co, ci, kh, kw]".into(),
                actual: format!("{wshape:?}"),
            });
        };
        if wci != ci {
            return Err(Error::ShapeMismatch {
                expected: format!("{ci} input channels"),
                actual: format!("weights expect {wci}"),
            });
        }
        if self.nodes[b.0].shape != [co] {
            return Err(Error::ShapeMismatch {
                expected: format!("bias [{co}]"),
                actual: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        let (oh, ow) = match (
            conv_out_len(h, kh, stride.0, padding.0),
            conv_out_len(wd, kw, stride.1, padding.1),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: "output spatial dims >= 1".into(),
                    actual: format!("input {h}x{wd}, kernel {kh}x{kw}"),
                })
            }
        };
        let mut y = gather_conv(
            &self.nodes[x.0].data,
            (ci, h, wd),
            &self.nodes[w.0].data,
            co,
            (kh, kw),
            stride,
            padding,
            (oh, ow),
        );
        for c in 0..co {
            let bias = self.nodes[b.0].data[c];
            for v in &mut y[c * oh * ow..(c + 1) * oh * ow] {
                *v += bias;
            }
        }
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            vec![co, oh, ow],
            y,
        ))
    }

    /// Transposed convolution with the default output size
    /// `(n−1)·stride − 2·pad + kernel`: x [ci, h, w], weights
    /// [ci, co, kh, kw], bias [co].
    pub fn deconv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<NodeId> {
        let (_, h, wd) = self.chw(x)?;
        let wshape = self.nodes[w.0].shape.clone();
        let [_, _, kh, kw] = wshape[..] else {
            return Err(Error::ShapeMismatch {
                expected: "rank-4 weights [ci, co, kh, kw]".into(),
                actual: format!("{wshape:?}"),
            });
        };
        let out = |n: usize, k: usize, s: usize, p: usize| ((n - 1) * s + k).checked_sub(2 * p);
        let (oh, ow) = match (
            out(h, kh, stride.0, padding.0),
            out(wd, kw, stride.1, padding.1),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: "output spatial dims >= 1".into(),
                    actual: format!("input {h}x{wd}, kernel {kh}x{kw}"),
                })
            }
        };
        self.deconv2d_to(x, w, b, stride, padding, (oh, ow))
    }

    /// Transposed convolution with an explicit output size. The output size
    /// must be consistent: a forward convolution of that size with the same
    /// geometry must land back on the input size.
    pub fn deconv2d_to(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
        padding: (usize, usize),
        (oh, ow): (usize, usize),
    ) -> Result<NodeId> {
        let (ci, h, wd) = self.chw(x)?;
        let wshape = self.nodes[w.0].shape.clone();
        let [wci, co, kh, kw] = wshape[..] else {
            return Err(Error::ShapeMismatch {
                expected: "rank-4 weights [ci, co, kh, kw]".into(),
                actual: format!("{wshape:?}"),
            });
        };
        if wci != ci {
            return Err(Error::ShapeMismatch {
                expected: format!("{ci} input channels"),
                actual: format!("weights expect {wci}"),
            });
        }
        if self.nodes[b.0].shape != [co] {
            return Err(Error::ShapeMismatch {
                expected: format!("bias [{co}]"),
                actual: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        if conv_out_len(oh, kh, stride.0, padding.0) != Some(h)
            || conv_out_len(ow, kw, stride.1, padding.1) != Some(wd)
        {
            return Err(Error::ShapeMismatch {
                expected: format!("an output size that convolves back to {h}x{wd}"),
                actual: format!("{oh}x{ow}"),
            });
        }
        let mut y = scatter_conv(
            &self.nodes[x.0].data,
            (ci, h, wd),
            &self.nodes[w.0].data,
            co,
            (kh, kw),
            stride,
            padding,
            (oh, ow),
        );
        for c in 0..co {
            let bias = self.nodes[b.0].data[c];
            for v in &mut y[c * oh * ow..(c + 1) * oh * ow] {
                *v += bias;
            }
        }
        Ok(self.push(
            Op::Deconv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
            vec![co, oh, ow],
            y,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Relu { x }, shape, data)
    }

    /// `scale · logistic(x)`, the bounded output unit.
    pub fn scaled_sigmoid(&mut self, x: NodeId, scale: f64) -> NodeId {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| scale / (1.0 + (-v).exp()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::ScaledSigmoid { x, scale }, shape, data)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.nodes[a.0].shape),
                actual: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::Sub { a, b }, shape, data))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v * v).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Square { x }, shape, data)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::Sum { x }, vec![1], vec![s])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.nodes[x.0].data.len().max(1);
        let s: f64 = self.nodes[x.0].data.iter().sum();
        self.push(Op::Mean { x }, vec![1], vec![s / n as f64])
    }

    /// Elementwise square root. The backward pass uses subgradient 0 at 0.
    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(Op::Sqrt { x }, shape, data)
    }

    /// `wa·a + wb·b` with matching shapes (the scheduled two-branch loss).
    pub fn add_weighted(&mut self, a: NodeId, b: NodeId, wa: f64, wb: f64) -> Result<NodeId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.nodes[a.0].shape),
                actual: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| wa * x + wb * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(Op::AddWeighted { a, b, wa, wb }, shape, data))
    }

    /// Reverse pass from a scalar node: populates gradients for every node
    /// on the tape that `loss` depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::InvalidConfig(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = self.nodes.iter().map(|n| vec![0.0; n.data.len()]).collect();
        self.grads[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            // Detach this node's gradient so child accumulation can borrow
            // the arena mutably; reattached below.
            let dy = std::mem::take(&mut self.grads[i]);
            match op {
                Op::Leaf => unreachable!("skipped above"),
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (ci, h, wd) = self.chw(x)?;
                    let [co, _, kh, kw] = self.nodes[w.0].shape[..] else {
                        unreachable!("validated at build")
                    };
                    let [_, oh, ow] = self.nodes[i].shape[..] else {
                        unreachable!()
                    };
                    let dx = scatter_conv(
                        &dy,
                        (co, oh, ow),
                        &self.nodes[w.0].data,
                        ci,
                        (kh, kw),
                        stride,
                        padding,
                        (h, wd),
                    );
                    let dw = weight_grad(
                        &self.nodes[x.0].data,
                        (ci, h, wd),
                        &dy,
                        (co, oh, ow),
                        (kh, kw),
                        stride,
                        padding,
                    );
                    accumulate(&mut self.grads[x.0], &dx);
                    accumulate(&mut self.grads[w.0], &dw);
                    for c in 0..co {
                        self.grads[b.0][c] +=
                            dy[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
                Op::Deconv2d {
                    x,
                    w,
                    b,
                    stride,
                    padding,
                } => {
                    let (ci, h, wd) = self.chw(x)?;
                    let [_, co, kh, kw] = self.nodes[w.0].shape[..] else {
                        unreachable!("validated at build")
                    };
                    let [_, oh, ow] = self.nodes[i].shape[..] else {
                        unreachable!()
                    };
                    // Input gradient: gather dy back through the same map;
                    // weight gradient: activation and gradient swap roles
                    // relative to the gather direction.
                    let dx = gather_conv(
                        &dy,
                        (co, oh, ow),
                        &self.nodes[w.0].data,
                        ci,
                        (kh, kw),
                        stride,
                        padding,
                        (h, wd),
                    );
                    let dw = weight_grad(
                        &dy,
                        (co, oh, ow),
                        &self.nodes[x.0].data,
                        (ci, h, wd),
                        (kh, kw),
                        stride,
                        padding,
                    );
                    accumulate(&mut self.grads[x.0], &dx);
                    accumulate(&mut self.grads[w.0], &dw);
                    for c in 0..co {
                        self.grads[b.0][c] +=
                            dy[c * oh * ow..(c + 1) * oh * ow].iter().sum::<f64>();
                    }
                }
                Op::Relu { x } => {
                    for (j, &g) in dy.iter().enumerate() {
                        if self.nodes[x.0].data[j] > 0.0 {
                            self.grads[x.0][j] += g;
                        }
                    }
                }
                Op::ScaledSigmoid { x, scale } => {
                    for (j, &g) in dy.iter().enumerate() {
                        let y = self.nodes[i].data[j];
                        self.grads[x.0][j] += g * y * (1.0 - y / scale);
                    }
                }
                Op::Sub { a, b } => {
                    for (j, &g) in dy.iter().enumerate() {
                        self.grads[a.0][j] += g;
                    }
                    for (j, &g) in dy.iter().enumerate() {
                        self.grads[b.0][j] -= g;
                    }
                }
                Op::Square { x } => {
                    for (j, &g) in dy.iter().enumerate() {
                        self.grads[x.0][j] += 2.0 * self.nodes[x.0].data[j] * g;
                    }
                }
                Op::Sum { x } => {
                    let g = dy[0];
                    for v in &mut self.grads[x.0] {
                        *v += g;
                    }
                }
                Op::Mean { x } => {
                    let g = dy[0] / self.nodes[x.0].data.len().max(1) as f64;
                    for v in &mut self.grads[x.0] {
                        *v += g;
                    }
                }
                Op::Sqrt { x } => {
                    for (j, &g) in dy.iter().enumerate() {
                        let y = self.nodes[i].data[j];
                        if y > 0.0 {
                            self.grads[x.0][j] += g / (2.0 * y);
                        }
                    }
                }
                Op::AddWeighted { a, b, wa, wb } => {
                    // A branch weighted exactly zero contributes nothing,
                    // not even a signed zero, so zero-weight gradients stay
                    // bit-identical to the single-branch computation.
                    if wa != 0.0 {
                        for (j, &g) in dy.iter().enumerate() {
                            self.grads[a.0][j] += wa * g;
                        }
                    }
                    if wb != 0.0 {
                        for (j, &g) in dy.iter().enumerate() {
                            self.grads[b.0][j] += wb * g;
                        }
                    }
                }
            }
            self.grads[i] = dy;
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randt(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randt(&mut rng, vec![1, 5, 7]);
        let xid = g.leaf(&x);
        let w = g.leaf(&Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(&Tensor::zeros(vec![1]));
        let y = g.conv2d(xid, w, b, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.data(y), x.data.as_slice());
    }

    #[test]
    fn conv_zero_weights_broadcast_bias() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randt(&mut rng, vec![3, 4, 4]);
        let xid = g.leaf(&x);
        let w = g.leaf(&Tensor::zeros(vec![2, 3, 3, 3]));
        let b = g.leaf(&Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        let y = g.conv2d(xid, w, b, (1, 1), (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4]);
        for (j, &v) in g.data(y).iter().enumerate() {
            let want = if j < 16 { 0.5 } else { -1.5 };
            assert_eq!(v, want);
        }
    }

    #[test]
    fn deconv_identity_kernel_passes_input_through() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randt(&mut rng, vec![1, 6, 3]);
        let xid = g.leaf(&x);
        let w = g.leaf(&Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.leaf(&Tensor::zeros(vec![1]));
        let y = g.deconv2d(xid, w, b, (1, 1), (0, 0)).unwrap();
        assert_eq!(g.data(y), x.data.as_slice());
    }

    #[test]
    fn deconv_stride_two_doubles_spatial_dims() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randt(&mut rng, vec![2, 4, 4]);
        let xid = g.leaf(&x);
        let w = randt(&mut rng, vec![2, 3, 4, 4]);
        let wid = g.leaf(&w);
        let b = g.leaf(&Tensor::zeros(vec![3]));
        let y = g.deconv2d(xid, wid, b, (2, 2), (1, 1)).unwrap();
        assert_eq!(g.shape(y), &[3, 8, 8]);
    }

    #[test]
    fn loss_sum_of_parameters_gives_unit_gradients() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = randt(&mut rng, vec![3, 4]);
        let pid = g.leaf(&p);
        let loss = g.sum(pid);
        g.backward(loss).unwrap();
        assert!(g.grad(pid).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn loss_half_norm_squared_gives_gradient_p() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = randt(&mut rng, vec![7]);
        let pid = g.leaf(&p);
        let sq = g.square(pid);
        let s = g.sum(sq);
        let half = g.add_weighted(s, s, 0.25, 0.25).unwrap();
        g.backward(half).unwrap();
        for (got, want) in g.grad(pid).unwrap().iter().zip(&p.data) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = randt(&mut rng, vec![2, 2]);
        let pid = g.leaf(&p);
        let sq = g.square(pid);
        assert!(g.backward(sq).is_err());
    }

    /// Central finite differences over every element of `leaf_values`,
    /// where `build` reconstructs the scalar loss from scratch.
    fn finite_diff(
        leaf_values: &Tensor,
        build: impl Fn(&Tensor) -> f64,
        h: f64,
    ) -> Vec<f64> {
        let mut fd = Vec::with_capacity(leaf_values.len());
        for j in 0..leaf_values.len() {
            let mut plus = leaf_values.clone();
            plus.data[j] += h;
            let mut minus = leaf_values.clone();
            minus.data[j] -= h;
            fd.push((build(&plus) - build(&minus)) / (2.0 * h));
        }
        fd
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randt(&mut rng, vec![2, 5, 5]);
        let w = randt(&mut rng, vec![3, 2, 3, 3]);
        let b = randt(&mut rng, vec![3]);
        let run = |xv: &Tensor, wv: &Tensor, bv: &Tensor| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let xi = g.leaf(xv);
            let wi = g.leaf(wv);
            let bi = g.leaf(bv);
            let y = g.conv2d(xi, wi, bi, (2, 2), (1, 1)).unwrap();
            let sq = g.square(y);
            let loss = g.mean(sq);
            g.backward(loss).unwrap();
            (
                g.data(loss)[0],
                g.grad(xi).unwrap().to_vec(),
                g.grad(wi).unwrap().to_vec(),
                g.grad(bi).unwrap().to_vec(),
            )
        };
        let (_, gx, gw, gb) = run(&x, &w, &b);
        let fx = finite_diff(&x, |xv| run(xv, &w, &b).0, 1e-5);
        let fw = finite_diff(&w, |wv| run(&x, wv, &b).0, 1e-5);
        let fb = finite_diff(&b, |bv| run(&x, &w, bv).0, 1e-5);
        for (a, f) in [(gx, fx), (gw, fw), (gb, fb)] {
            for (got, want) in a.iter().zip(&f) {
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn deconv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randt(&mut rng, vec![3, 4, 4]);
        let w = randt(&mut rng, vec![3, 2, 4, 4]);
        let b = randt(&mut rng, vec![2]);
        let run = |xv: &Tensor, wv: &Tensor, bv: &Tensor| -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let xi = g.leaf(xv);
            let wi = g.leaf(wv);
            let bi = g.leaf(bv);
            let y = g.deconv2d(xi, wi, bi, (2, 2), (1, 1)).unwrap();
            let act = g.scaled_sigmoid(y, 3.0);
            let sq = g.square(act);
            let loss = g.mean(sq);
            g.backward(loss).unwrap();
            (
                g.data(loss)[0],
                g.grad(xi).unwrap().to_vec(),
                g.grad(wi).unwrap().to_vec(),
                g.grad(bi).unwrap().to_vec(),
            )
        };
        let (_, gx, gw, gb) = run(&x, &w, &b);
        let fx = finite_diff(&x, |xv| run(xv, &w, &b).0, 1e-5);
        let fw = finite_diff(&w, |wv| run(&x, wv, &b).0, 1e-5);
        let fb = finite_diff(&b, |bv| run(&x, &w, bv).0, 1e-5);
        for (a, f) in [(gx, fx), (gw, fw), (gb, fb)] {
            for (got, want) in a.iter().zip(&f) {
                assert!(
                    (got - want).abs() <= 1e-6 * want.abs().max(1.0),
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn rmse_loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred_in = randt(&mut rng, vec![1, 3, 3]);
        let truth = randt(&mut rng, vec![1, 3, 3]);
        let run = |pv: &Tensor| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let pi = g.leaf(pv);
            let ti = g.leaf(&truth);
            let act = g.scaled_sigmoid(pi, 10.0);
            let d = g.sub(act, ti).unwrap();
            let sq = g.square(d);
            let m = g.mean(sq);
            let loss = g.sqrt(m);
            g.backward(loss).unwrap();
            (g.data(loss)[0], g.grad(pi).unwrap().to_vec())
        };
        let (_, ga) = run(&pred_in);
        let fd = finite_diff(&pred_in, |pv| run(pv).0, 1e-5);
        for (got, want) in ga.iter().zip(&fd) {
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));
        }
    }

    #[test]
    fn relu_masks_gradients() {
        let p = Tensor::new(vec![4], vec![-1.0, 2.0, -3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let pid = g.leaf(&p);
        let r = g.relu(pid);
        let loss = g.sum(r);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(pid).unwrap(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(g.data(r), &[0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn deconv_to_rejects_inconsistent_output_size() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randt(&mut rng, vec![1, 4, 4]);
        let xid = g.leaf(&x);
        let w = randt(&mut rng, vec![1, 1, 4, 4]);
        let wid = g.leaf(&w);
        let b = g.leaf(&Tensor::zeros(vec![1]));
        // 20x20 convolves to 10x10, not 4x4.
        assert!(g.deconv2d_to(xid, wid, b, (2, 2), (1, 1), (20, 20)).is_err());
        // 9x9 convolves back to 4x4 under floor division: allowed.
        assert!(g.deconv2d_to(xid, wid, b, (2, 2), (1, 1), (9, 9)).is_ok());
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = randt(&mut rng, vec![3, 5, 5]);
        let xid = g.leaf(&x);
        let w = randt(&mut rng, vec![2, 4, 3, 3]);
        let wid = g.leaf(&w);
        let b = g.leaf(&Tensor::zeros(vec![2]));
        assert!(g.conv2d(xid, wid, b, (1, 1), (1, 1)).is_err());
    }
}

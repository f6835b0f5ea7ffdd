//! The autodiff tape: node arena, forward ops, reverse pass.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::cell::RefCell;

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<ArrayD<f64>>>>;

/// Inputs available to a backward closure.
pub struct BackCtx<'a> {
    /// Gradient flowing into this node's output.
    pub grad: &'a ArrayD<f64>,
    /// Parent values, in op-argument order.
    pub parents: Vec<&'a ArrayD<f64>>,
    /// This node's forward value.
    pub value: &'a ArrayD<f64>,
    /// Which parents need a gradient.
    pub needs: &'a [bool],
}

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Arena of computation nodes; ops append, `backward` walks in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Per-node gradients produced by [`Tape::backward`]; only leaves that
/// need gradients are retained.
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        self.by_node.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<ArrayD<f64>> {
        self.by_node.get_mut(var.0).and_then(|g| g.take())
    }
}

/// GEMM with a deterministic two-way split along the larger output axis
/// when large enough to pay.
fn par_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let n = b.dim().1;
    let mut out = Array2::<f64>::zeros((m, n));
    let flops = m * k * n;
    if flops > 2_000_000 && (m >= 8 || n >= 8) {
        if n >= m {
            let split = n / 2;
            let (b_l, b_r) = b.split_at(Axis(1), split);
            let (mut o_l, mut o_r) = out.view_mut().split_at(Axis(1), split);
            rayon::join(
                || ndarray::linalg::general_mat_mul(1.0, &a, &b_l, 0.0, &mut o_l),
                || ndarray::linalg::general_mat_mul(1.0, &a, &b_r, 0.0, &mut o_r),
            );
        } else {
            let split = m / 2;
            let (a_top, a_bot) = a.split_at(Axis(0), split);
            let (mut o_top, mut o_bot) = out.view_mut().split_at(Axis(0), split);
            rayon::join(
                || ndarray::linalg::general_mat_mul(1.0, &a_top, &b, 0.0, &mut o_top),
                || ndarray::linalg::general_mat_mul(1.0, &a_bot, &b, 0.0, &mut o_bot),
            );
        }
    } else {
        ndarray::linalg::general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Copy of a node's forward value.
    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Runs `f` against a node's forward value without copying.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<f64>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    fn push(
        &self,
        value: ArrayD<f64>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(
        &self,
        a: Var,
        value: ArrayD<f64>,
        backward: impl Fn(&BackCtx<'_>) -> ArrayD<f64> + 'static,
    ) -> Var {
        let needs = self.nodes.borrow()[a.0].needs_grad;
        self.push(
            value,
            vec![a.0],
            Some(Box::new(move |ctx| vec![Some(backward(ctx))])),
            needs,
        )
    }

    /// Leaf that accumulates gradients (a parameter).
    pub fn param(&self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, true)
    }

    /// Leaf with no gradient (data, targets, masks).
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, vec![], None, false)
    }

    // ---- elementwise ----

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.needs2(a, b);
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value + &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.clone()),
                ]
            })),
            na || nb,
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.needs2(a, b);
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value - &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| ctx.grad.mapv(|g| -g)),
                ]
            })),
            na || nb,
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.needs2(a, b);
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value * &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad * ctx.parents[1]),
                    ctx.needs[1].then(|| ctx.grad * ctx.parents[0]),
                ]
            })),
            na || nb,
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.needs2(a, b);
        let value = {
            let nodes = self.nodes.borrow();
            &nodes[a.0].value / &nodes[b.0].value
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx| {
                vec![
                    ctx.needs[0].then(|| ctx.grad / ctx.parents[1]),
                    ctx.needs[1].then(|| {
                        let mut g = ctx.grad * ctx.parents[0];
                        g.zip_mut_with(ctx.parents[1], |v, &b| *v = -*v / (b * b));
                        g
                    }),
                ]
            })),
            na || nb,
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| -v);
        self.unary(a, value, |ctx| ctx.grad.mapv(|g| -g))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v * c);
        self.unary(a, value, move |ctx| ctx.grad.mapv(|g| g * c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v + c);
        self.unary(a, value, |ctx| ctx.grad.clone())
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v.max(0.0));
        self.unary(a, value, |ctx| {
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.value, |gv, &y| {
                if y <= 0.0 {
                    *gv = 0.0;
                }
            });
            g
        })
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(a, value, |ctx| {
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.value, |gv, &s| *gv *= s * (1.0 - s));
            g
        })
    }

    pub fn exp(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(f64::exp);
        self.unary(a, value, |ctx| ctx.grad * ctx.value)
    }

    pub fn ln(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(f64::ln);
        self.unary(a, value, |ctx| ctx.grad / ctx.parents[0])
    }

    /// `sqrt(x + eps)`, guarding the derivative at 0.
    pub fn sqrt_eps(&self, a: Var, eps: f64) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| (v + eps).sqrt());
        self.unary(a, value, |ctx| {
            let mut g = ctx.grad.clone();
            g.zip_mut_with(ctx.value, |gv, &y| *gv *= 0.5 / y);
            g
        })
    }

    pub fn square(&self, a: Var) -> Var {
        let value = self.nodes.borrow()[a.0].value.mapv(|v| v * v);
        self.unary(a, value, |ctx| {
            let mut g = ctx.grad * ctx.parents[0];
            g.mapv_inplace(|v| v * 2.0);
            g
        })
    }

    // ---- reductions & shape ----

    pub fn sum_all(&self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[1]), self.nodes.borrow()[a.0].value.sum());
        self.unary(a, value, |ctx| {
            let g = ctx.grad.iter().next().copied().unwrap_or(0.0);
            ArrayD::from_elem(ctx.parents[0].raw_dim(), g)
        })
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis of a 2-D tensor: `[n, m] -> [n]`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v2 = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            v2.sum_axis(Axis(1)).into_dyn()
        };
        self.unary(a, value, |ctx| {
            let (n, m) = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .dim();
            let g1 = ctx.grad.view().into_dimensionality::<Ix1>().unwrap();
            let mut out = Array2::<f64>::zeros((n, m));
            for i in 0..n {
                out.row_mut(i).fill(g1[i]);
            }
            out.into_dyn()
        })
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let value = self.nodes.borrow()[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: incompatible shape");
        self.unary(a, value, |ctx| {
            ctx.grad
                .clone()
                .into_shape_with_order(ctx.parents[0].raw_dim())
                .expect("reshape backward")
        })
    }

    pub fn transpose2(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v2 = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            v2.t().to_owned().into_dyn()
        };
        self.unary(a, value, |ctx| {
            let g2 = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            g2.t().to_owned().into_dyn()
        })
    }

    /// Concatenates along `axis`.
    pub fn concat(&self, axis: usize, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let (value, sizes, needs) = {
            let nodes = self.nodes.borrow();
            let views: Vec<_> = vars.iter().map(|v| nodes[v.0].value.view()).collect();
            let value = ndarray::concatenate(Axis(axis), &views).expect("concat: shape mismatch");
            let sizes: Vec<usize> = vars.iter().map(|v| nodes[v.0].value.shape()[axis]).collect();
            let needs = vars.iter().any(|v| nodes[v.0].needs_grad);
            (value, sizes, needs)
        };
        self.push(
            value,
            vars.iter().map(|v| v.0).collect(),
            Some(Box::new(move |ctx| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for (k, &sz) in sizes.iter().enumerate() {
                    if ctx.needs[k] {
                        let slice = ctx
                            .grad
                            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + sz));
                        out.push(Some(slice.to_owned()));
                    } else {
                        out.push(None);
                    }
                    start += sz;
                }
                out
            })),
            needs,
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (na, nb) = self.needs2(a, b);
        let value = {
            let nodes = self.nodes.borrow();
            let av = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
            par_matmul(av, bv).into_dyn()
        };
        self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let av = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = ctx.parents[1].view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    ctx.needs[0].then(|| par_matmul(g.view(), bv.t()).into_dyn()),
                    ctx.needs[1].then(|| par_matmul(av.t(), g.view()).into_dyn()),
                ]
            })),
            na || nb,
        )
    }

    /// Adds a row vector `[m]` to every row of `[n, m]`.
    pub fn add_rowvec(&self, x: Var, b: Var) -> Var {
        let (nx, nb) = self.needs2(x, b);
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
            (&xv + &bv).into_dyn()
        };
        self.push(
            value,
            vec![x.0, b.0],
            Some(Box::new(move |ctx| {
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    ctx.needs[0].then(|| ctx.grad.clone()),
                    ctx.needs[1].then(|| g.sum_axis(Axis(0)).into_dyn()),
                ]
            })),
            nx || nb,
        )
    }

    /// Fully-connected layer: `x[n,din] · w[din,dout] + b[dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_rowvec(xw, b)
    }

    /// Row-wise softmax of `[n, m]`.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = v.to_owned();
            for mut row in out.rows_mut() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|x| x / sum);
            }
            out.into_dyn()
        };
        self.unary(a, value, |ctx| {
            let s = ctx.value.view().into_dimensionality::<Ix2>().unwrap();
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array2::<f64>::zeros(s.dim());
            for i in 0..s.dim().0 {
                let si = s.row(i);
                let gi = g.row(i);
                let dot = si.dot(&gi);
                for j in 0..s.dim().1 {
                    out[[i, j]] = si[j] * (gi[j] - dot);
                }
            }
            out.into_dyn()
        })
    }

    /// Row-wise `log(sum(exp(x)))` of `[n, m]`, stabilized: `[n]`.
    pub fn logsumexp_rows(&self, a: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array1::<f64>::zeros(v.dim().0);
            for (i, row) in v.rows().into_iter().enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                out[i] = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            }
            out.into_dyn()
        };
        self.unary(a, value, |ctx| {
            let x = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let lse = ctx.value.view().into_dimensionality::<Ix1>().unwrap();
            let g = ctx.grad.view().into_dimensionality::<Ix1>().unwrap();
            let mut out = Array2::<f64>::zeros(x.dim());
            for i in 0..x.dim().0 {
                for j in 0..x.dim().1 {
                    out[[i, j]] = g[i] * (x[[i, j]] - lse[i]).exp();
                }
            }
            out.into_dyn()
        })
    }

    /// L2-normalizes each row of `[n, d]`. Rows with norm below `fallback_eps`
    /// become `e_1` with zero gradient (deterministic fallback).
    pub fn l2_normalize_rows(&self, a: Var, fallback_eps: f64) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = v.to_owned();
            for mut row in out.rows_mut() {
                let norm = row.dot(&row).sqrt();
                if norm < fallback_eps {
                    row.fill(0.0);
                    row[0] = 1.0;
                } else {
                    row.mapv_inplace(|x| x / norm);
                }
            }
            out.into_dyn()
        };
        self.unary(a, value, move |ctx| {
            let x = ctx.parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array2::<f64>::zeros(x.dim());
            for i in 0..x.dim().0 {
                let xi = x.row(i);
                let gi = g.row(i);
                let norm = xi.dot(&xi).sqrt();
                if norm < fallback_eps {
                    continue; // fallback row: zero gradient
                }
                let dot = xi.dot(&gi);
                let inv = 1.0 / norm;
                let inv3 = inv / (norm * norm);
                for j in 0..x.dim().1 {
                    out[[i, j]] = gi[j] * inv - xi[j] * dot * inv3;
                }
            }
            out.into_dyn()
        })
    }

    /// Selects rows of `[n, d]` by index (repeats allowed): `[m, d]`.
    pub fn gather_rows(&self, a: Var, idx: Vec<usize>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let mut out = Array2::<f64>::zeros((idx.len(), v.dim().1));
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).assign(&v.row(i));
            }
            out.into_dyn()
        };
        self.unary(a, value, move |ctx| {
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let (n, d) = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .dim();
            let mut out = Array2::<f64>::zeros((n, d));
            for (r, &i) in idx.iter().enumerate() {
                let mut row = out.row_mut(i);
                row += &g.row(r);
            }
            out.into_dyn()
        })
    }

    // ---- convolution & spatial ----

    /// Same-padded stride-1 2-D convolution:
    /// `x[cin,h,w] ⊛ w[cout,cin,k,k] + b[cout] -> [cout,h,w]`, odd `k`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            nodes[x.0].needs_grad || nodes[w.0].needs_grad || nodes[b.0].needs_grad
        };
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let wv = nodes[w.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
            conv2d_forward(&xv.to_owned(), &wv.to_owned(), &bv.to_owned()).into_dyn()
        };
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |ctx| {
                let xv = ctx.parents[0]
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap()
                    .to_owned();
                let wv = ctx.parents[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
                    .to_owned();
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                let (gx, gw, gb) = conv2d_backward(&xv, &wv, &g, ctx.needs[0], ctx.needs[1]);
                vec![
                    gx.map(|a| a.into_dyn()),
                    gw.map(|a| a.into_dyn()),
                    ctx.needs[2].then(|| gb.into_dyn()),
                ]
            })),
            needs,
        )
    }

    /// 2×2 max pooling (even spatial dims), first-wins tie break.
    pub fn maxpool2(&self, x: Var) -> Var {
        let (value, argmax) = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h, w) = v.dim();
            assert!(h % 2 == 0 && w % 2 == 0, "maxpool2: odd spatial dims");
            let mut out = Array3::<f64>::zeros((c, h / 2, w / 2));
            let mut arg = vec![0u8; c * (h / 2) * (w / 2)];
            let mut k = 0;
            for ci in 0..c {
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        let mut best = f64::NEG_INFINITY;
                        let mut bi = 0u8;
                        for (i, (dy, dx)) in
                            [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate()
                        {
                            let val = v[[ci, 2 * y + dy, 2 * xx + dx]];
                            if val > best {
                                best = val;
                                bi = i as u8;
                            }
                        }
                        out[[ci, y, xx]] = best;
                        arg[k] = bi;
                        k += 1;
                    }
                }
            }
            (out.into_dyn(), arg)
        };
        self.unary(x, value, move |ctx| {
            let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h2, w2) = g.dim();
            let mut out = Array3::<f64>::zeros((c, h2 * 2, w2 * 2));
            let mut k = 0;
            for ci in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let (dy, dx) = match argmax[k] {
                            0 => (0, 0),
                            1 => (0, 1),
                            2 => (1, 0),
                            _ => (1, 1),
                        };
                        out[[ci, 2 * y + dy, 2 * xx + dx]] += g[[ci, y, xx]];
                        k += 1;
                    }
                }
            }
            out.into_dyn()
        })
    }

    /// Nearest-neighbor 2× upsampling.
    pub fn upsample2(&self, x: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h, w) = v.dim();
            let mut out = Array3::<f64>::zeros((c, h * 2, w * 2));
            for ci in 0..c {
                for y in 0..h * 2 {
                    for xx in 0..w * 2 {
                        out[[ci, y, xx]] = v[[ci, y / 2, xx / 2]];
                    }
                }
            }
            out.into_dyn()
        };
        self.unary(x, value, |ctx| {
            let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h2, w2) = g.dim();
            let mut out = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
            for ci in 0..c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        out[[ci, y / 2, xx / 2]] += g[[ci, y, xx]];
                    }
                }
            }
            out.into_dyn()
        })
    }

    /// Per-channel instance normalization with affine parameters:
    /// `(x - μ_c)/sqrt(σ²_c + eps) · γ_c + β_c`.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            nodes[x.0].needs_grad || nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad
        };
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let gm = nodes[gamma.0].value.view().into_dimensionality::<Ix1>().unwrap();
            let bt = nodes[beta.0].value.view().into_dimensionality::<Ix1>().unwrap();
            let (c, h, w) = v.dim();
            let n = (h * w) as f64;
            let mut out = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                let plane = v.index_axis(Axis(0), ci);
                let mean = plane.sum() / n;
                let var = plane.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let mut o = out.index_axis_mut(Axis(0), ci);
                o.assign(&plane.mapv(|p| (p - mean) * inv * gm[ci] + bt[ci]));
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |ctx| {
                let v = ctx.parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let gm = ctx.parents[1].view().into_dimensionality::<Ix1>().unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
                let (c, h, w) = v.dim();
                let n = (h * w) as f64;
                let mut gx = ctx.needs[0].then(|| Array3::<f64>::zeros((c, h, w)));
                let mut ggamma = ctx.needs[1].then(|| Array1::<f64>::zeros(c));
                let mut gbeta = ctx.needs[2].then(|| Array1::<f64>::zeros(c));
                for ci in 0..c {
                    let plane = v.index_axis(Axis(0), ci);
                    let gp = g.index_axis(Axis(0), ci);
                    let mean = plane.sum() / n;
                    let var = plane.iter().map(|&p| (p - mean) * (p - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    // x̂ and the two reduced moments of the gradient.
                    let gsum = gp.sum();
                    let gxhat_sum = plane
                        .iter()
                        .zip(gp.iter())
                        .map(|(&p, &gg)| gg * (p - mean) * inv)
                        .sum::<f64>();
                    if let Some(gb) = gbeta.as_mut() {
                        gb[ci] = gsum;
                    }
                    if let Some(gg) = ggamma.as_mut() {
                        gg[ci] = gxhat_sum;
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut o = gx.index_axis_mut(Axis(0), ci);
                        for ((&p, &gg), ov) in plane.iter().zip(gp.iter()).zip(o.iter_mut()) {
                            let xhat = (p - mean) * inv;
                            *ov = gm[ci] * inv * (gg - gsum / n - xhat * gxhat_sum / n);
                        }
                    }
                }
                vec![
                    gx.map(|a| a.into_dyn()),
                    ggamma.map(|a| a.into_dyn()),
                    gbeta.map(|a| a.into_dyn()),
                ]
            })),
            needs,
        )
    }

    // ---- sampling / scattering ----

    /// Samples `x[c,h,w]` at integer pixels `(y, x)`: `[n, c]`.
    pub fn gather_pixels(&self, x: Var, pixels: Vec<(usize, usize)>) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let c = v.dim().0;
            let mut out = Array2::<f64>::zeros((pixels.len(), c));
            for (r, &(py, px)) in pixels.iter().enumerate() {
                for ci in 0..c {
                    out[[r, ci]] = v[[ci, py, px]];
                }
            }
            out.into_dyn()
        };
        self.unary(x, value, move |ctx| {
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let (c, h, w) = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .dim();
            let mut out = Array3::<f64>::zeros((c, h, w));
            for (r, &(py, px)) in pixels.iter().enumerate() {
                for ci in 0..c {
                    out[[ci, py, px]] += g[[r, ci]];
                }
            }
            out.into_dyn()
        })
    }

    /// Scatters token rows `[n, e]` into an `[e, h, w]` zero map at integer
    /// pixels, averaging collisions.
    pub fn scatter_mean(&self, tokens: Var, pixels: Vec<(usize, usize)>, h: usize, w: usize) -> Var {
        let counts: std::collections::HashMap<(usize, usize), f64> = {
            let mut m = std::collections::HashMap::new();
            for &p in &pixels {
                *m.entry(p).or_insert(0.0) += 1.0;
            }
            m
        };
        let counts2 = counts.clone();
        let pixels2 = pixels.clone();
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[tokens.0].value.view().into_dimensionality::<Ix2>().unwrap();
            let e = v.dim().1;
            let mut out = Array3::<f64>::zeros((e, h, w));
            for (r, &(py, px)) in pixels.iter().enumerate() {
                let cnt = counts[&(py, px)];
                for ei in 0..e {
                    out[[ei, py, px]] += v[[r, ei]] / cnt;
                }
            }
            out.into_dyn()
        };
        self.unary(tokens, value, move |ctx| {
            let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
            let (n, e) = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix2>()
                .unwrap()
                .dim();
            let mut out = Array2::<f64>::zeros((n, e));
            for (r, &(py, px)) in pixels2.iter().enumerate() {
                let cnt = counts2[&(py, px)];
                for ei in 0..e {
                    out[[r, ei]] = g[[ei, py, px]] / cnt;
                }
            }
            out.into_dyn()
        })
    }

    /// Bilinear samples `x[c,h,w]` at sub-pixel `(x, y)` points with edge
    /// clamping: `[n, c]`.
    pub fn bilinear_sample(&self, x: Var, points: Vec<(f64, f64)>) -> Var {
        let (corners, value) = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h, w) = v.dim();
            let mut corners = Vec::with_capacity(points.len());
            let mut out = Array2::<f64>::zeros((points.len(), c));
            for (r, &(px, py)) in points.iter().enumerate() {
                let cs = bilinear_corners(px, py, h, w);
                for ci in 0..c {
                    out[[r, ci]] = cs
                        .iter()
                        .map(|&(yy, xx, wt)| wt * v[[ci, yy, xx]])
                        .sum::<f64>();
                }
                corners.push(cs);
            }
            (corners, out.into_dyn())
        };
        self.unary(x, value, move |ctx| {
            let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
            let (c, h, w) = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .dim();
            let mut out = Array3::<f64>::zeros((c, h, w));
            for (r, cs) in corners.iter().enumerate() {
                for &(yy, xx, wt) in cs {
                    for ci in 0..c {
                        out[[ci, yy, xx]] += wt * g[[r, ci]];
                    }
                }
            }
            out.into_dyn()
        })
    }

    /// Warps `x[c,h,w]` by homography matrix `m` (forward mapping, like
    /// image warping): inverse-mapped bilinear with zero fill.
    pub fn warp_bilinear(&self, x: Var, m_inv: [[f64; 3]; 3], out_h: usize, out_w: usize) -> Var {
        // Precompute source corners and weights per output pixel.
        let coords = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let (_, h, w) = v.dim();
            let mut coords: Vec<Option<[(usize, usize, f64); 4]>> =
                Vec::with_capacity(out_h * out_w);
            for yy in 0..out_h {
                for xx in 0..out_w {
                    let (x_f, y_f) = (xx as f64, yy as f64);
                    let den = m_inv[2][0] * x_f + m_inv[2][1] * y_f + m_inv[2][2];
                    if den.abs() <= 1e-12 {
                        coords.push(None);
                        continue;
                    }
                    let sx = (m_inv[0][0] * x_f + m_inv[0][1] * y_f + m_inv[0][2]) / den;
                    let sy = (m_inv[1][0] * x_f + m_inv[1][1] * y_f + m_inv[1][2]) / den;
                    if !(sx > -1.0 && sy > -1.0 && sx < w as f64 && sy < h as f64) {
                        coords.push(None);
                        continue;
                    }
                    coords.push(Some(bilinear_corners_zero(sx, sy, h, w)));
                }
            }
            coords
        };
        let coords2 = coords.clone();
        let value = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let c = v.dim().0;
            let mut out = Array3::<f64>::zeros((c, out_h, out_w));
            for yy in 0..out_h {
                for xx in 0..out_w {
                    if let Some(cs) = &coords[yy * out_w + xx] {
                        for ci in 0..c {
                            out[[ci, yy, xx]] = cs
                                .iter()
                                .map(|&(sy, sx, wt)| wt * v[[ci, sy, sx]])
                                .sum::<f64>();
                        }
                    }
                }
            }
            out.into_dyn()
        };
        self.unary(x, value, move |ctx| {
            let g = ctx.grad.view().into_dimensionality::<Ix3>().unwrap();
            let (c, h, w) = ctx.parents[0]
                .view()
                .into_dimensionality::<Ix3>()
                .unwrap()
                .dim();
            let mut out = Array3::<f64>::zeros((c, h, w));
            for yy in 0..out_h {
                for xx in 0..out_w {
                    if let Some(cs) = &coords2[yy * out_w + xx] {
                        for &(sy, sx, wt) in cs.iter() {
                            for ci in 0..c {
                                out[[ci, sy, sx]] += wt * g[[ci, yy, xx]];
                            }
                        }
                    }
                }
            }
            out.into_dyn()
        })
    }

    /// Samples the full-resolution output of a stride-`k`, kernel-`k`
    /// transposed convolution at sub-pixel points, without materializing it:
    /// `x[cin,hc,wc]`, `w[cin,cout,k,k]`, `b[cout]`, points in full-res
    /// `(x, y)` with edge clamping; result `[n, cout]`.
    pub fn conv_transpose_sample(
        &self,
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        points: Vec<(f64, f64)>,
    ) -> Var {
        let needs = {
            let nodes = self.nodes.borrow();
            nodes[x.0].needs_grad || nodes[w.0].needs_grad || nodes[b.0].needs_grad
        };
        let corners: Vec<[(usize, usize, f64); 4]> = {
            let nodes = self.nodes.borrow();
            let v = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let (_, hc, wc) = v.dim();
            points
                .iter()
                .map(|&(px, py)| bilinear_corners(px, py, hc * k, wc * k))
                .collect()
        };
        let corners2 = corners.clone();
        let value = {
            let nodes = self.nodes.borrow();
            let xv = nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
            let wv = nodes[w.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap();
            let bv = nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
            let (cin, _, _) = xv.dim();
            let cout = wv.dim().1;
            let mut out = Array2::<f64>::zeros((corners.len(), cout));
            for (r, cs) in corners.iter().enumerate() {
                for &(fy, fx, wt) in cs {
                    let (iy, ix) = (fy / k, fx / k);
                    let (ty, tx) = (fy % k, fx % k);
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            acc += xv[[ci, iy, ix]] * wv[[ci, co, ty, tx]];
                        }
                        out[[r, co]] += wt * acc;
                    }
                }
                for co in 0..cout {
                    out[[r, co]] += bv[co]; // corner weights sum to 1
                }
            }
            out.into_dyn()
        };
        self.push(
            value,
            vec![x.0, w.0, b.0],
            Some(Box::new(move |ctx| {
                let xv = ctx.parents[0].view().into_dimensionality::<Ix3>().unwrap();
                let wv = ctx.parents[1]
                    .view()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap();
                let g = ctx.grad.view().into_dimensionality::<Ix2>().unwrap();
                let (cin, hc, wc) = xv.dim();
                let cout = wv.dim().1;
                let mut gx = ctx.needs[0].then(|| Array3::<f64>::zeros((cin, hc, wc)));
                let mut gw = ctx.needs[1].then(|| ndarray::Array4::<f64>::zeros(wv.dim()));
                let mut gb = ctx.needs[2].then(|| Array1::<f64>::zeros(cout));
                for (r, cs) in corners2.iter().enumerate() {
                    for &(fy, fx, wt) in cs {
                        let (iy, ix) = (fy / k, fx / k);
                        let (ty, tx) = (fy % k, fx % k);
                        for co in 0..cout {
                            let go = wt * g[[r, co]];
                            if go == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                if let Some(gx) = gx.as_mut() {
                                    gx[[ci, iy, ix]] += go * wv[[ci, co, ty, tx]];
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw[[ci, co, ty, tx]] += go * xv[[ci, iy, ix]];
                                }
                            }
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        for co in 0..cout {
                            gb[co] += g[[r, co]];
                        }
                    }
                }
                vec![
                    gx.map(|a| a.into_dyn()),
                    gw.map(|a| a.into_dyn()),
                    gb.map(|a| a.into_dyn()),
                ]
            })),
            needs,
        )
    }

    fn needs2(&self, a: Var, b: Var) -> (bool, bool) {
        let nodes = self.nodes.borrow();
        (nodes[a.0].needs_grad, nodes[b.0].needs_grad)
    }

    /// Reverse pass from a scalar root. Returns gradients for leaves
    /// (params); interior gradients are freed as soon as they are consumed.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for i in (0..=root.0).rev() {
            if grads[i].is_none() || !nodes[i].needs_grad {
                continue;
            }
            let Some(backward) = &nodes[i].backward else {
                continue; // leaf: keep gradient
            };
            let grad = grads[i].take().unwrap();
            let parent_idx = nodes[i].parents.clone();
            let needs: Vec<bool> = parent_idx.iter().map(|&p| nodes[p].needs_grad).collect();
            let ctx = BackCtx {
                grad: &grad,
                parents: parent_idx.iter().map(|&p| &nodes[p].value).collect(),
                value: &nodes[i].value,
                needs: &needs,
            };
            let parent_grads = backward(&ctx);
            drop(ctx);
            for (p, pg) in parent_idx.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    match &mut grads[*p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { by_node: grads }
    }
}

/// Corner pixels and weights for edge-clamped bilinear sampling.
fn bilinear_corners(px: f64, py: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let cx = px.clamp(0.0, (w - 1) as f64);
    let cy = py.clamp(0.0, (h - 1) as f64);
    let x0 = cx.floor();
    let y0 = cy.floor();
    let fx = cx - x0;
    let fy = cy - y0;
    let x0 = x0 as usize;
    let y0 = y0 as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    [
        (y0, x0, (1.0 - fx) * (1.0 - fy)),
        (y0, x1, fx * (1.0 - fy)),
        (y1, x0, (1.0 - fx) * fy),
        (y1, x1, fx * fy),
    ]
}

/// Corner pixels/weights for zero-fill warping: out-of-range corners get
/// weight on an arbitrary valid pixel with weight 0.
fn bilinear_corners_zero(px: f64, py: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let mk = |yy: isize, xx: isize, wt: f64| -> (usize, usize, f64) {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            (0, 0, 0.0)
        } else {
            (yy as usize, xx as usize, wt)
        }
    };
    let (x0i, y0i) = (x0 as isize, y0 as isize);
    [
        mk(y0i, x0i, (1.0 - fx) * (1.0 - fy)),
        mk(y0i, x0i + 1, fx * (1.0 - fy)),
        mk(y0i + 1, x0i, (1.0 - fx) * fy),
        mk(y0i + 1, x0i + 1, fx * fy),
    ]
}

/// Output-row blocks sized so each unrolled column block stays cache
/// friendly (≈4 MB).
fn conv_row_blocks(h: usize, wd: usize, ck: usize) -> Vec<(usize, usize)> {
    let rows = (4_000_000 / (8 * ck * wd)).clamp(4, h);
    let mut blocks = Vec::new();
    let mut y = 0;
    while y < h {
        let end = (y + rows).min(h);
        blocks.push((y, end));
        y = end;
    }
    blocks
}

/// Fills the unrolled columns of output rows `[y0, y1)`:
/// `[cin·kh·kw, (y1−y0)·w]`.
fn im2col_block(
    x_flat: &[f64],
    cols: &mut Array2<f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    y0: usize,
    y1: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let cols_flat = cols.as_slice_mut().unwrap();
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &x_flat[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let dy = ky as isize - ph as isize;
            for kx in 0..kw {
                let dx = kx as isize - pw as isize;
                let row = ci * kh * kw + ky * kw + kx;
                let out_row = &mut cols_flat[row * n..(row + 1) * n];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize).min(w as isize - dx)).max(0) as usize;
                for (bi, y) in (y0..y1).enumerate() {
                    let dst = &mut out_row[bi * w..(bi + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    dst[..x_lo].fill(0.0);
                    dst[x_hi..].fill(0.0);
                    let src = sy as usize * w + (x_lo as isize + dx) as usize;
                    dst[x_lo..x_hi].copy_from_slice(&plane[src..src + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_block`]: scatter-adds a column block into the image
/// gradient.
fn col2im_block(
    cols: &Array2<f64>,
    out_flat: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    y0: usize,
    y1: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let cols_flat = cols.as_slice().unwrap();
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &mut out_flat[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            let dy = ky as isize - ph as isize;
            for kx in 0..kw {
                let dx = kx as isize - pw as isize;
                let row = ci * kh * kw + ky * kw + kx;
                let in_row = &cols_flat[row * n..(row + 1) * n];
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize).min(w as isize - dx)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for (bi, y) in (y0..y1).enumerate() {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = sy as usize * w + (x_lo as isize + dx) as usize;
                    let srcs = &in_row[bi * w + x_lo..bi * w + x_hi];
                    for (d, s) in plane[dst..dst + srcs.len()].iter_mut().zip(srcs) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Array3<f64>, w: &ndarray::Array4<f64>, b: &Array1<f64>) -> Array3<f64> {
    let (cin, h, wd) = x.dim();
    let (cout, cin_w, kh, kw) = w.dim();
    assert_eq!(cin, cin_w, "conv2d: channel mismatch");
    assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: even kernel");
    let ck = cin * kh * kw;
    let w2 = w.view().into_shape_with_order((cout, ck)).unwrap();
    let x_flat = x.as_slice().expect("conv2d: contiguous input");

    let mut out2 = Array2::<f64>::zeros((cout, h * wd));
    let blocks = conv_row_blocks(h, wd, ck);
    // Fixed two-way split over blocks: deterministic regardless of
    // scheduling since blocks write disjoint output columns.
    let mid = blocks.len().div_ceil(2);
    let mut col_views: Vec<ndarray::ArrayViewMut2<'_, f64>> = Vec::with_capacity(blocks.len());
    let mut rest = out2.view_mut();
    for &(y0, y1) in &blocks {
        let (block_view, right) = rest.split_at(Axis(1), (y1 - y0) * wd);
        col_views.push(block_view);
        rest = right;
    }
    drop(rest);
    let run = |views: Vec<ndarray::ArrayViewMut2<'_, f64>>, blocks: &[(usize, usize)]| {
        for (mut view, &(y0, y1)) in views.into_iter().zip(blocks) {
            let mut cols = Array2::<f64>::zeros((ck, (y1 - y0) * wd));
            im2col_block(x_flat, &mut cols, cin, h, wd, kh, kw, y0, y1);
            ndarray::linalg::general_mat_mul(1.0, &w2, &cols.view(), 0.0, &mut view);
        }
    };
    let tail_views = col_views.split_off(mid.min(col_views.len()));
    let (head_blocks, tail_blocks) = blocks.split_at(mid);
    rayon::join(
        || run(col_views, head_blocks),
        || run(tail_views, tail_blocks),
    );

    let mut out = out2.into_shape_with_order((cout, h, wd)).unwrap();
    for ci in 0..cout {
        out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + b[ci]);
    }
    out
}

fn conv2d_backward(
    x: &Array3<f64>,
    w: &ndarray::Array4<f64>,
    g: &Array3<f64>,
    need_x: bool,
    need_w: bool,
) -> (Option<Array3<f64>>, Option<ndarray::Array4<f64>>, Array1<f64>) {
    let (cin, h, wd) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let ck = cin * kh * kw;
    let g2 = g.view().into_shape_with_order((cout, h * wd)).unwrap();
    let gb = g2.sum_axis(Axis(1));
    let x_flat = x.as_slice().expect("conv2d backward: contiguous input");

    let blocks = conv_row_blocks(h, wd, ck);
    let mid = blocks.len().div_ceil(2);
    let w2 = w.view().into_shape_with_order((cout, ck)).unwrap();

    // Each half accumulates its own gw / gx partials; summed in fixed order.
    let part = |blocks: &[(usize, usize)]| -> (Option<Array2<f64>>, Option<Vec<f64>>) {
        let mut gw_part = need_w.then(|| Array2::<f64>::zeros((cout, ck)));
        let mut gx_part = need_x.then(|| vec![0.0f64; cin * h * wd]);
        for &(y0, y1) in blocks {
            let n = (y1 - y0) * wd;
            let g_block = g2.slice(ndarray::s![.., y0 * wd..y1 * wd]);
            if let Some(gw) = gw_part.as_mut() {
                let mut cols = Array2::<f64>::zeros((ck, n));
                im2col_block(x_flat, &mut cols, cin, h, wd, kh, kw, y0, y1);
                ndarray::linalg::general_mat_mul(1.0, &g_block, &cols.t(), 1.0, &mut gw.view_mut());
            }
            if let Some(gx) = gx_part.as_mut() {
                let mut gcols = Array2::<f64>::zeros((ck, n));
                ndarray::linalg::general_mat_mul(1.0, &w2.t(), &g_block, 0.0, &mut gcols.view_mut());
                col2im_block(&gcols, gx, cin, h, wd, kh, kw, y0, y1);
            }
        }
        (gw_part, gx_part)
    };
    let (head, tail) = blocks.split_at(mid);
    let ((gw_a, gx_a), (gw_b, gx_b)) = rayon::join(|| part(head), || part(tail));

    let gw = match (gw_a, gw_b) {
        (Some(a), Some(b)) => {
            let sum = a + b;
            Some(sum.into_shape_with_order((cout, cin, kh, kw)).unwrap())
        }
        _ => None,
    };
    let gx = match (gx_a, gx_b) {
        (Some(mut a), Some(b)) => {
            for (av, bv) in a.iter_mut().zip(&b) {
                *av += bv;
            }
            Some(Array3::from_shape_vec((cin, h, wd), a).unwrap())
        }
        _ => None,
    };
    (gx, gw, gb)
}

/// Materializes a full stride-`k` kernel-`k` transposed convolution
/// (inference only; gradients go through [`Tape::conv_transpose_sample`]).
pub fn conv_transpose_dense(
    x: &Array3<f64>,
    w: &ndarray::Array4<f64>,
    b: &Array1<f64>,
    k: usize,
) -> Array3<f64> {
    let (cin, hc, wc) = x.dim();
    let (cin_w, cout, kh, kw) = w.dim();
    assert_eq!(cin, cin_w);
    assert!(kh == k && kw == k);
    let mut out = Array3::<f64>::zeros((cout, hc * k, wc * k));
    // k == stride: each output pixel receives exactly one tap.
    for co in 0..cout {
        for fy in 0..hc * k {
            let (iy, ty) = (fy / k, fy % k);
            for fx in 0..wc * k {
                let (ix, tx) = (fx / k, fx % k);
                let mut acc = b[co];
                for ci in 0..cin {
                    acc += x[[ci, iy, ix]] * w[[ci, co, ty, tx]];
                }
                out[[co, fy, fx]] = acc;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::{central_diff_grad, max_rel_err};
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randu(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks tape gradients against central differences for a scalar
    /// function of several inputs.
    fn check_op(
        shapes: &[&[usize]],
        f: impl Fn(&Tape, &[Var]) -> Var,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ArrayD<f64>> = shapes.iter().map(|s| randu(&mut rng, s)).collect();

        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let root = f(&tape, &vars);
        let mut grads = tape.backward(root);

        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.take(*var).expect("missing gradient");
            let numeric = central_diff_grad(
                |xs| {
                    let t = Tape::new();
                    let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
                    t.scalar(f(&t, &vs))
                },
                &inputs,
                i,
                1e-5,
            );
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < tol, "input {i}: rel err {err}");
        }
    }

    #[test]
    fn elementwise_grads() {
        check_op(
            &[&[3, 4], &[3, 4]],
            |t, v| {
                let s = t.mul(v[0], v[1]);
                let s = t.add(s, v[0]);
                let s = t.sub(s, v[1]);
                t.sum_all(s)
            },
            1,
            1e-7,
        );
        check_op(
            &[&[6]],
            |t, v| {
                let e = t.exp(v[0]);
                let s = t.sigmoid(e);
                let q = t.square(s);
                t.mean_all(q)
            },
            2,
            1e-7,
        );
        check_op(
            &[&[5], &[5]],
            |t, v| {
                let b = t.add_scalar(v[1], 3.0); // keep denominator away from 0
                let d = t.div(v[0], b);
                t.sum_all(d)
            },
            3,
            1e-7,
        );
    }

    #[test]
    fn matmul_and_linear_grads() {
        check_op(
            &[&[3, 4], &[4, 2], &[2]],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2]);
                let y = t.relu(y);
                t.sum_all(y)
            },
            4,
            1e-7,
        );
    }

    #[test]
    fn softmax_logsumexp_normalize_grads() {
        check_op(
            &[&[3, 5]],
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let l = t.logsumexp_rows(v[0]);
                let n = t.l2_normalize_rows(v[0], 1e-8);
                let a = t.sum_all(s);
                let b = t.sum_all(l);
                let c = t.sum_all(t.square(n));
                t.add(t.add(a, b), c)
            },
            5,
            1e-6,
        );
    }

    #[test]
    fn conv_and_pool_grads() {
        check_op(
            &[&[2, 6, 6], &[3, 2, 3, 3], &[3]],
            |t, v| {
                let y = t.conv2d(v[0], v[1], v[2]);
                let y = t.relu(y);
                let y = t.maxpool2(y);
                let y = t.upsample2(y);
                t.sum_all(y)
            },
            6,
            1e-6,
        );
    }

    #[test]
    fn instance_norm_grads() {
        // Probe with a fixed linear functional: sum(y²) is nearly invariant
        // to x after normalization, which starves finite differences.
        let mut prng = ChaCha8Rng::seed_from_u64(70);
        let probe = randu(&mut prng, &[2, 4, 4]);
        check_op(
            &[&[2, 4, 4], &[2], &[2]],
            move |t, v| {
                let y = t.instance_norm(v[0], v[1], v[2], 1e-5);
                let c = t.constant(probe.clone());
                t.sum_all(t.mul(y, c))
            },
            7,
            1e-6,
        );
    }

    #[test]
    fn gather_scatter_bilinear_grads() {
        check_op(
            &[&[3, 5, 5]],
            |t, v| {
                let g = t.gather_pixels(v[0], vec![(0, 0), (2, 3), (4, 4), (2, 3)]);
                t.sum_all(t.square(g))
            },
            8,
            1e-7,
        );
        check_op(
            &[&[4, 3]],
            |t, v| {
                let s = t.scatter_mean(v[0], vec![(1, 1), (2, 3), (1, 1), (0, 0)], 4, 5);
                t.sum_all(t.square(s))
            },
            9,
            1e-7,
        );
        check_op(
            &[&[2, 6, 6]],
            |t, v| {
                let s = t.bilinear_sample(
                    v[0],
                    vec![(0.3, 0.7), (4.9, 4.1), (5.0, 5.0), (2.5, 2.5)],
                );
                t.sum_all(t.square(s))
            },
            10,
            1e-6,
        );
    }

    #[test]
    fn warp_and_transpose_sample_grads() {
        let m_inv = [[1.02, 0.01, -0.4], [-0.02, 0.97, 0.3], [1e-4, -1e-4, 1.0]];
        check_op(
            &[&[2, 6, 6]],
            |t, v| {
                let wrp = t.warp_bilinear(v[0], m_inv, 6, 6);
                t.sum_all(t.square(wrp))
            },
            11,
            1e-6,
        );
        check_op(
            &[&[3, 4, 4], &[3, 5, 2, 2], &[5]],
            |t, v| {
                let s = t.conv_transpose_sample(
                    v[0],
                    v[1],
                    v[2],
                    2,
                    vec![(0.5, 0.5), (6.9, 7.0), (3.25, 1.75)],
                );
                t.sum_all(t.square(s))
            },
            12,
            1e-6,
        );
    }

    #[test]
    fn concat_and_gather_rows_grads() {
        check_op(
            &[&[2, 3], &[2, 2], &[4, 5]],
            |t, v| {
                let c = t.concat(1, &[v[0], v[1]]);
                let g = t.gather_rows(v[2], vec![3, 0, 3]);
                let a = t.sum_all(t.square(c));
                let b = t.sum_all(t.square(g));
                t.add(a, b)
            },
            13,
            1e-7,
        );
    }

    #[test]
    fn constants_do_not_accumulate_gradients() {
        let tape = Tape::new();
        let p = tape.param(arr2(&[[1.0, 2.0]]).into_dyn());
        let c = tape.constant(arr2(&[[3.0, 4.0]]).into_dyn());
        let y = tape.sum_all(tape.mul(p, c));
        let grads = tape.backward(y);
        assert!(grads.get(p).is_some());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn dense_transpose_conv_matches_sampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Array3::from_shape_fn((3, 4, 5), |_| rng.random_range(-1.0..1.0));
        let w = ndarray::Array4::from_shape_fn((3, 6, 4, 4), |_| rng.random_range(-1.0..1.0));
        let b = arr1(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.4]);
        let dense = conv_transpose_dense(&x, &w, &b, 4);

        let tape = Tape::new();
        let xv = tape.constant(x.clone().into_dyn());
        let wv = tape.constant(w.clone().into_dyn());
        let bv = tape.constant(b.clone().into_dyn());
        // Integer points must match the dense map exactly.
        let pts = vec![(0.0, 0.0), (7.0, 3.0), (19.0, 15.0), (10.0, 12.0)];
        let s = tape.conv_transpose_sample(xv, wv, bv, 4, pts.clone());
        let sv = tape.value(s);
        for (r, &(px, py)) in pts.iter().enumerate() {
            for co in 0..6 {
                let d = dense[[co, py as usize, px as usize]];
                assert!((sv[[r, co]] - d).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_accumulates_shared_nodes() {
        let tape = Tape::new();
        let p = tape.param(arr1(&[2.0]).into_dyn());
        // y = p*p + p  =>  dy/dp = 2p + 1 = 5
        let y = tape.add(tape.mul(p, p), p);
        let s = tape.sum_all(y);
        let grads = tape.backward(s);
        assert_eq!(grads.get(p).unwrap()[[0]], 5.0);
    }
}

#[cfg(test)]
mod perf_probe {
    use super::*;
    use ndarray::{Array1, Array3, Array4};

    #[test]
    #[ignore]
    fn conv_throughput() {
        let x = Array3::<f64>::from_elem((16, 256, 256), 0.5);
        let w = Array4::<f64>::from_elem((16, 16, 3, 3), 0.01);
        let b = Array1::<f64>::zeros(16);
        let t0 = std::time::Instant::now();
        let mut n = 0;
        while t0.elapsed().as_secs_f64() < 3.0 {
            let _ = conv2d_forward(&x, &w, &b);
            n += 1;
        }
        let per = t0.elapsed().as_secs_f64() / n as f64;
        let flops = 2.0 * 256.0 * 256.0 * 16.0 * 16.0 * 9.0;
        eprintln!("conv fwd: {:.1} ms, {:.2} GFLOP/s", per * 1e3, flops / per / 1e9);

        let tape = Tape::new();
        let xv = tape.param(x.clone().into_dyn());
        let wv = tape.param(w.clone().into_dyn());
        let bv = tape.param(b.clone().into_dyn());
        let t0 = std::time::Instant::now();
        let mut n = 0;
        while t0.elapsed().as_secs_f64() < 3.0 {
            let t = Tape::new();
            let xv = t.param(tape.value(xv));
            let wv = t.param(tape.value(wv));
            let bv = t.param(tape.value(bv));
            let y = t.conv2d(xv, wv, bv);
            let s = t.sum_all(y);
            let _ = t.backward(s);
            n += 1;
        }
        let per = t0.elapsed().as_secs_f64() / n as f64;
        eprintln!("conv fwd+bwd: {:.1} ms, {:.2} GFLOP/s eff", per * 1e3, 3.0 * flops / per / 1e9);
    }
}


#[cfg(test)]
mod conv1x1_check {
    use super::*;
    use crate::nn::check::{central_diff_grad, max_rel_err};
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv1x1_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shapes: [&[usize]; 3] = [&[3, 5, 5], &[4, 3, 1, 1], &[4]];
        let inputs: Vec<ArrayD<f64>> = shapes
            .iter()
            .map(|s| ArrayD::from_shape_fn(IxDyn(s), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let f = |xs: &[ArrayD<f64>]| {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.param(x.clone())).collect();
            let y = t.conv2d(vs[0], vs[1], vs[2]);
            t.scalar(t.sum_all(t.square(y)))
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let y = tape.conv2d(vars[0], vars[1], vars[2]);
        let root = tape.sum_all(tape.square(y));
        let mut grads = tape.backward(root);
        for i in 0..3 {
            let analytic = grads.take(vars[i]).unwrap();
            let numeric = central_diff_grad(f, &inputs, i, 1e-6);
            let err = max_rel_err(&analytic, &numeric);
            assert!(err < 1e-6, "input {i}: rel err {err}");
        }
    }
}

//! Reverse-mode gradient tape.
//!
//! A [`Tape`] records a Wengert list of operations; [`Var`] is a lightweight
//! handle into it. Nodes are created in topological order, so the backward
//! pass is a single reverse sweep. Each edge stores a VJP closure that
//! accumulates its contribution directly into the parent's gradient buffer,
//! so slicing and concatenation backpropagate without materializing padded
//! temporaries.
//!
//! Contract violations — shape mismatches, non-scalar losses, out-of-range
//! slices — panic; they are bugs in the calling code, not runtime conditions.

use std::cell::RefCell;

use super::elem::{self, Elem};
use super::tensor::Tensor;

type Vjp<E> = Box<dyn Fn(&Tensor<E>, &mut [E])>;

struct Edge<E: Elem> {
    parent: usize,
    vjp: Vjp<E>,
}

struct Node<E: Elem> {
    value: Tensor<E>,
    edges: Vec<Edge<E>>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<E: Elem = f32> {
    nodes: RefCell<Vec<Node<E>>>,
}

/// Handle to a tape node.
#[derive(Clone, Copy)]
pub struct Var<'t, E: Elem = f32> {
    tape: &'t Tape<E>,
    idx: usize,
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Grads<E: Elem = f32> {
    by_node: Vec<Option<Tensor<E>>>,
}

impl<E: Elem> Grads<E> {
    pub fn get(&self, var: Var<'_, E>) -> Option<&Tensor<E>> {
        self.by_node[var.idx].as_ref()
    }
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, edges: Vec<Edge<E>>, needs_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node { value, edges, needs_grad });
        Var { tape: self, idx }
    }

    /// A leaf that participates in gradients (a parameter).
    pub fn param(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Vec::new(), true)
    }

    /// A leaf with no gradient (an input or a constant).
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Vec::new(), false)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_, E>) -> Grads<E> {
        assert_eq!(
            loss.value().shape(),
            (1, 1),
            "backward requires a scalar loss, got {:?}",
            loss.value().shape()
        );
        self.backward_seeded(&[(loss, Tensor::scalar(E::ONE))])
    }

    /// Reverse sweep seeded with cotangents at arbitrary nodes.
    pub fn backward_seeded(&self, seeds: &[(Var<'_, E>, Tensor<E>)]) -> Grads<E> {
        let nodes = self.nodes.borrow();
        let mut by_node: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        for (var, seed) in seeds {
            assert_eq!(
                seed.shape(),
                nodes[var.idx].value.shape(),
                "seed shape mismatch at node {}",
                var.idx
            );
            match &mut by_node[var.idx] {
                Some(g) => g.add_in_place(seed),
                slot => *slot = Some(seed.clone()),
            }
        }
        for idx in (0..nodes.len()).rev() {
            let node = &nodes[idx];
            if !node.needs_grad || by_node[idx].is_none() {
                continue;
            }
            let grad_out = by_node[idx].clone().unwrap();
            for edge in &node.edges {
                if !nodes[edge.parent].needs_grad {
                    continue;
                }
                let (r, c) = nodes[edge.parent].value.shape();
                let slot = by_node[edge.parent].get_or_insert_with(|| Tensor::zeros(r, c));
                (edge.vjp)(&grad_out, slot.data_mut());
            }
        }
        Grads { by_node }
    }
}

fn acc_add<E: Elem>(acc: &mut [E], g: &[E]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a = *a + b;
    }
}

impl<'t, E: Elem> Var<'t, E> {
    pub fn value(&self) -> Tensor<E> {
        self.tape.nodes.borrow()[self.idx].value.clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.idx].needs_grad
    }

    fn unary(self, value: Tensor<E>, vjp: impl Fn(&Tensor<E>, &mut [E]) + 'static) -> Self {
        let needs = self.needs_grad();
        let edges = if needs { vec![Edge { parent: self.idx, vjp: Box::new(vjp) }] } else { Vec::new() };
        self.tape.push(value, edges, needs)
    }

    fn binary(
        self,
        rhs: Self,
        value: Tensor<E>,
        vjp_l: impl Fn(&Tensor<E>, &mut [E]) + 'static,
        vjp_r: impl Fn(&Tensor<E>, &mut [E]) + 'static,
    ) -> Self {
        assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let mut edges: Vec<Edge<E>> = Vec::with_capacity(2);
        if self.needs_grad() {
            edges.push(Edge { parent: self.idx, vjp: Box::new(vjp_l) });
        }
        if rhs.needs_grad() {
            edges.push(Edge { parent: rhs.idx, vjp: Box::new(vjp_r) });
        }
        let needs = !edges.is_empty();
        self.tape.push(value, edges, needs)
    }

    // ---- elementwise binary ----

    pub fn add(self, rhs: Self) -> Self {
        let v = self.value().zip(&rhs.value(), |a, b| a + b);
        self.binary(
            rhs,
            v,
            |g, acc| acc_add(acc, g.data()),
            |g, acc| acc_add(acc, g.data()),
        )
    }

    pub fn sub(self, rhs: Self) -> Self {
        let v = self.value().zip(&rhs.value(), |a, b| a - b);
        self.binary(
            rhs,
            v,
            |g, acc| acc_add(acc, g.data()),
            |g, acc| {
                for (a, &b) in acc.iter_mut().zip(g.data()) {
                    *a = *a - b;
                }
            },
        )
    }

    pub fn mul(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let v = a.zip(&b, |x, y| x * y);
        self.binary(
            rhs,
            v,
            move |g, acc| {
                for ((o, &gi), &bi) in acc.iter_mut().zip(g.data()).zip(b.data()) {
                    *o = *o + gi * bi;
                }
            },
            move |g, acc| {
                for ((o, &gi), &ai) in acc.iter_mut().zip(g.data()).zip(a.data()) {
                    *o = *o + gi * ai;
                }
            },
        )
    }

    pub fn div(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let v = a.zip(&b, |x, y| x / y);
        let b2 = b.clone();
        self.binary(
            rhs,
            v,
            move |g, acc| {
                for ((o, &gi), &bi) in acc.iter_mut().zip(g.data()).zip(b.data()) {
                    *o = *o + gi / bi;
                }
            },
            move |g, acc| {
                for (((o, &gi), &ai), &bi) in acc.iter_mut().zip(g.data()).zip(a.data()).zip(b2.data()) {
                    *o = *o - gi * ai / (bi * bi);
                }
            },
        )
    }

    // ---- elementwise unary ----

    pub fn neg(self) -> Self {
        let v = self.value().map(|x| -x);
        self.unary(v, |g, acc| {
            for (a, &b) in acc.iter_mut().zip(g.data()) {
                *a = *a - b;
            }
        })
    }

    pub fn add_scalar(self, c: E) -> Self {
        let v = self.value().map(|x| x + c);
        self.unary(v, |g, acc| acc_add(acc, g.data()))
    }

    pub fn mul_scalar(self, c: E) -> Self {
        let v = self.value().map(|x| x * c);
        self.unary(v, move |g, acc| {
            for (a, &b) in acc.iter_mut().zip(g.data()) {
                *a = *a + b * c;
            }
        })
    }

    pub fn exp(self) -> Self {
        let v = self.value().map(Elem::exp);
        let out = v.clone();
        self.unary(v, move |g, acc| {
            for ((a, &gi), &yi) in acc.iter_mut().zip(g.data()).zip(out.data()) {
                *a = *a + gi * yi;
            }
        })
    }

    pub fn log(self) -> Self {
        let x = self.value();
        let v = x.map(Elem::ln);
        self.unary(v, move |g, acc| {
            for ((a, &gi), &xi) in acc.iter_mut().zip(g.data()).zip(x.data()) {
                *a = *a + gi / xi;
            }
        })
    }

    pub fn sqrt(self) -> Self {
        let v = self.value().map(Elem::sqrt);
        let out = v.clone();
        let half = E::from_f64(0.5);
        self.unary(v, move |g, acc| {
            for ((a, &gi), &yi) in acc.iter_mut().zip(g.data()).zip(out.data()) {
                *a = *a + gi * half / yi;
            }
        })
    }

    pub fn sin(self) -> Self {
        let x = self.value();
        let v = x.map(Elem::sin);
        self.unary(v, move |g, acc| {
            for ((a, &gi), &xi) in acc.iter_mut().zip(g.data()).zip(x.data()) {
                *a = *a + gi * xi.cos();
            }
        })
    }

    pub fn cos(self) -> Self {
        let x = self.value();
        let v = x.map(Elem::cos);
        self.unary(v, move |g, acc| {
            for ((a, &gi), &xi) in acc.iter_mut().zip(g.data()).zip(x.data()) {
                *a = *a - gi * xi.sin();
            }
        })
    }

    pub fn sigmoid(self) -> Self {
        let v = self.value().map(sigmoid_scalar);
        let out = v.clone();
        self.unary(v, move |g, acc| {
            for ((a, &gi), &yi) in acc.iter_mut().zip(g.data()).zip(out.data()) {
                *a = *a + gi * yi * (E::ONE - yi);
            }
        })
    }

    /// Numerically stable `log(sigmoid(x)) = min(x, 0) - ln(1 + exp(-|x|))`.
    pub fn log_sigmoid(self) -> Self {
        let x = self.value();
        let v = x.map(|xi| {
            let m = if xi < E::ZERO { xi } else { E::ZERO };
            m - (E::ONE + (-xi.abs()).exp()).ln()
        });
        self.unary(v, move |g, acc| {
            for ((a, &gi), &xi) in acc.iter_mut().zip(g.data()).zip(x.data()) {
                *a = *a + gi * sigmoid_scalar(-xi);
            }
        })
    }

    /// `x * sigmoid(x)`, the activation used by the MLP blocks.
    pub fn silu(self) -> Self {
        self.mul(self.sigmoid())
    }

    // ---- matrix products ----

    /// `self[m,k] * rhs[k,n]`.
    pub fn matmul(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.shape();
        let (k2, n) = b.shape();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let v = Tensor::new(m, n, elem::matmul(a.data(), b.data(), m, k, n));
        let (a2, b2) = (a.clone(), b.clone());
        self.binary(
            rhs,
            v,
            move |g, acc| elem::matmul_nt_into(g.data(), b2.data(), m, n, k, acc),
            move |g, acc| elem::matmul_tn_into(a2.data(), g.data(), m, k, n, acc),
        )
    }

    /// `self[m,k] * rhs[n,k]^T`.
    pub fn matmul_nt(self, rhs: Self) -> Self {
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = a.shape();
        let (n, k2) = b.shape();
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let v = Tensor::new(m, n, elem::matmul_nt(a.data(), b.data(), m, k, n));
        let (a2, b2) = (a.clone(), b.clone());
        self.binary(
            rhs,
            v,
            move |g, acc| elem::matmul_into(g.data(), b2.data(), m, n, k, acc),
            move |g, acc| elem::matmul_tn_into(g.data(), a2.data(), m, n, k, acc),
        )
    }

    pub fn transpose(self) -> Self {
        let x = self.value();
        let (m, n) = x.shape();
        let v = x.transpose();
        self.unary(v, move |g, acc| {
            // g is [n, m]; accumulate its transpose into the [m, n] parent
            for r in 0..n {
                for c in 0..m {
                    acc[c * n + r] = acc[c * n + r] + g.get(r, c);
                }
            }
        })
    }

    // ---- row-wise normalizations ----

    /// Softmax over each row.
    pub fn softmax_rows(self) -> Self {
        let x = self.value();
        let (m, n) = x.shape();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = x.row_slice(r);
            let max = row
                .iter()
                .cloned()
                .fold(E::from_f64(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
            let exps: Vec<E> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom = E::sum_slice(&exps);
            data.extend(exps.iter().map(|&e| E::from_f64(e.to_f64() / denom)));
        }
        let v = Tensor::new(m, n, data);
        let y = v.clone();
        self.unary(v, move |g, acc| {
            for r in 0..m {
                let gr = g.row_slice(r);
                let yr = y.row_slice(r);
                let inner: f64 = gr.iter().zip(yr).fold(0.0, |s, (&gi, &yi)| s + (gi * yi).to_f64());
                let inner = E::from_f64(inner);
                let arow = &mut acc[r * n..(r + 1) * n];
                for ((a, &gi), &yi) in arow.iter_mut().zip(gr).zip(yr) {
                    *a = *a + yi * (gi - inner);
                }
            }
        })
    }

    /// Log-softmax over each row.
    pub fn log_softmax_rows(self) -> Self {
        let x = self.value();
        let (m, n) = x.shape();
        let mut data = Vec::with_capacity(m * n);
        let mut probs = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = x.row_slice(r);
            let max = row
                .iter()
                .cloned()
                .fold(E::from_f64(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
            let exps: Vec<E> = row.iter().map(|&v| (v - max).exp()).collect();
            let denom = E::sum_slice(&exps);
            let log_denom = E::from_f64(denom.ln());
            data.extend(row.iter().map(|&v| v - max - log_denom));
            probs.extend(exps.iter().map(|&e| E::from_f64(e.to_f64() / denom)));
        }
        let v = Tensor::new(m, n, data);
        let p = Tensor::new(m, n, probs);
        self.unary(v, move |g, acc| {
            for r in 0..m {
                let gr = g.row_slice(r);
                let pr = p.row_slice(r);
                let gsum = E::from_f64(E::sum_slice(gr));
                let arow = &mut acc[r * n..(r + 1) * n];
                for ((a, &gi), &pi) in arow.iter_mut().zip(gr).zip(pr) {
                    *a = *a + gi - pi * gsum;
                }
            }
        })
    }

    /// Row-wise layer normalization with affine parameters `gamma`, `beta`
    /// of shape `[1, n]`.
    pub fn layernorm(self, gamma: Self, beta: Self, eps: E) -> Self {
        let x = self.value();
        let (m, n) = x.shape();
        assert_eq!(gamma.shape(), (1, n), "layernorm gamma shape");
        assert_eq!(beta.shape(), (1, n), "layernorm beta shape");
        let gv = gamma.value();
        let bv = beta.value();

        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = x.row_slice(r);
            let mean = E::sum_slice(row) / n as f64;
            let var = row.iter().fold(0.0, |acc, &v| {
                let d = v.to_f64() - mean;
                acc + d * d
            }) / n as f64;
            let istd = 1.0 / (var + eps.to_f64()).sqrt();
            inv_std.push(E::from_f64(istd));
            xhat.extend(row.iter().map(|&v| E::from_f64((v.to_f64() - mean) * istd)));
        }
        let xhat = Tensor::new(m, n, xhat);
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let h = xhat.row_slice(r);
            out.extend(h.iter().zip(gv.data()).zip(bv.data()).map(|((&hi, &gi), &bi)| hi * gi + bi));
        }
        let v = Tensor::new(m, n, out);

        let xhat_x = xhat.clone();
        let gv_x = gv.clone();
        let vjp_x = move |g: &Tensor<E>, acc: &mut [E]| {
            for r in 0..m {
                let gr = g.row_slice(r);
                let hr = xhat_x.row_slice(r);
                let gg: Vec<E> = gr.iter().zip(gv_x.data()).map(|(&gi, &ga)| gi * ga).collect();
                let mean_gg = E::sum_slice(&gg) / n as f64;
                let mean_gg_h: f64 =
                    gg.iter().zip(hr).fold(0.0, |s, (&a, &h)| s + (a * h).to_f64()) / n as f64;
                let istd = inv_std[r].to_f64();
                let arow = &mut acc[r * n..(r + 1) * n];
                for ((a, &ggi), &hi) in arow.iter_mut().zip(&gg).zip(hr) {
                    *a = *a + E::from_f64((ggi.to_f64() - mean_gg - hi.to_f64() * mean_gg_h) * istd);
                }
            }
        };
        let xhat_g = xhat;
        let vjp_gamma = move |g: &Tensor<E>, acc: &mut [E]| {
            for r in 0..m {
                for (a, (&gi, &hi)) in acc.iter_mut().zip(g.row_slice(r).iter().zip(xhat_g.row_slice(r))) {
                    *a = *a + gi * hi;
                }
            }
        };
        let vjp_beta = move |g: &Tensor<E>, acc: &mut [E]| {
            for r in 0..m {
                acc_add(acc, g.row_slice(r));
            }
        };

        assert!(std::ptr::eq(self.tape, gamma.tape) && std::ptr::eq(self.tape, beta.tape));
        let mut edges: Vec<Edge<E>> = Vec::new();
        if self.needs_grad() {
            edges.push(Edge { parent: self.idx, vjp: Box::new(vjp_x) });
        }
        if gamma.needs_grad() {
            edges.push(Edge { parent: gamma.idx, vjp: Box::new(vjp_gamma) });
        }
        if beta.needs_grad() {
            edges.push(Edge { parent: beta.idx, vjp: Box::new(vjp_beta) });
        }
        let needs = !edges.is_empty();
        self.tape.push(v, edges, needs)
    }

    // ---- reductions ----

    pub fn sum(self) -> Self {
        let x = self.value();
        let v = Tensor::scalar(E::from_f64(E::sum_slice(x.data())));
        self.unary(v, move |g, acc| {
            let gi = g.item();
            for a in acc.iter_mut() {
                *a = *a + gi;
            }
        })
    }

    pub fn mean(self) -> Self {
        let x = self.value();
        let k = x.numel() as f64;
        let v = Tensor::scalar(E::from_f64(E::sum_slice(x.data()) / k));
        self.unary(v, move |g, acc| {
            let gi = E::from_f64(g.item().to_f64() / k);
            for a in acc.iter_mut() {
                *a = *a + gi;
            }
        })
    }

    /// Sum over columns, producing `[m, 1]`.
    pub fn row_sum(self) -> Self {
        let x = self.value();
        let (m, n) = x.shape();
        let data: Vec<E> = (0..m).map(|r| E::from_f64(E::sum_slice(x.row_slice(r)))).collect();
        let v = Tensor::new(m, 1, data);
        self.unary(v, move |g, acc| {
            for r in 0..m {
                let gi = g.get(r, 0);
                let arow = &mut acc[r * n..(r + 1) * n];
                for a in arow.iter_mut() {
                    *a = *a + gi;
                }
            }
        })
    }

    /// `sum(|x|)`.
    pub fn l1_norm(self) -> Self {
        let x = self.value();
        let total = x.data().iter().fold(0.0, |acc, &v| acc + v.abs().to_f64());
        let v = Tensor::scalar(E::from_f64(total));
        self.unary(v, move |g, acc| {
            let gi = g.item();
            for (a, &xi) in acc.iter_mut().zip(x.data()) {
                if xi > E::ZERO {
                    *a = *a + gi;
                } else if xi < E::ZERO {
                    *a = *a - gi;
                }
            }
        })
    }

    /// `sum(x^2)` (squared L2 norm).
    pub fn sum_squares(self) -> Self {
        let x = self.value();
        let total = x.data().iter().fold(0.0, |acc, &v| {
            let f = v.to_f64();
            acc + f * f
        });
        let v = Tensor::scalar(E::from_f64(total));
        self.unary(v, move |g, acc| {
            let two_g = E::from_f64(2.0) * g.item();
            for (a, &xi) in acc.iter_mut().zip(x.data()) {
                *a = *a + two_g * xi;
            }
        })
    }

    /// `sqrt(sum(x^2))`.
    pub fn l2_norm(self) -> Self {
        self.sum_squares().sqrt()
    }

    // ---- shape ops ----

    pub fn slice_rows(self, r0: usize, r1: usize) -> Self {
        let x = self.value();
        let (m, n) = x.shape();
        assert!(r0 < r1 && r1 <= m, "row slice {r0}..{r1} out of {m}");
        let v = Tensor::new(r1 - r0, n, x.data()[r0 * n..r1 * n].to_vec());
        self.unary(v, move |g, acc| {
            acc_add(&mut acc[r0 * n..r1 * n], g.data());
        })
    }

    pub fn slice_cols(self, c0: usize, c1: usize) -> Self {
        let x = self.value();
        let (m, n) = x.shape();
        assert!(c0 < c1 && c1 <= n, "col slice {c0}..{c1} out of {n}");
        let w = c1 - c0;
        let v = Tensor::from_fn(m, w, |r, c| x.get(r, c0 + c));
        self.unary(v, move |g, acc| {
            for r in 0..m {
                let arow = &mut acc[r * n + c0..r * n + c1];
                acc_add(arow, g.row_slice(r));
            }
        })
    }

    /// Select rows of an embedding table by index (may repeat).
    pub fn gather_rows(self, ids: &[usize]) -> Self {
        let x = self.value();
        let (vocab, n) = x.shape();
        for &id in ids {
            assert!(id < vocab, "gather index {id} out of table rows {vocab}");
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            data.extend_from_slice(x.row_slice(id));
        }
        let v = Tensor::new(ids.len(), n, data);
        let ids = ids.to_vec();
        self.unary(v, move |g, acc| {
            for (r, &id) in ids.iter().enumerate() {
                acc_add(&mut acc[id * n..(id + 1) * n], g.row_slice(r));
            }
        })
    }

    // ---- broadcasts ----

    /// Add a `[1, n]` row vector to every row of `self[m, n]`.
    pub fn add_row_broadcast(self, bias: Self) -> Self {
        let x = self.value();
        let b = bias.value();
        let (m, n) = x.shape();
        assert_eq!(b.shape(), (1, n), "row broadcast shape");
        let v = Tensor::from_fn(m, n, |r, c| x.get(r, c) + b.get(0, c));
        self.binary(
            bias,
            v,
            |g, acc| acc_add(acc, g.data()),
            move |g, acc| {
                for r in 0..m {
                    acc_add(acc, g.row_slice(r));
                }
            },
        )
    }

    /// Add a `[m, 1]` column vector to every column of `self[m, n]`.
    pub fn add_col_broadcast(self, col: Self) -> Self {
        let x = self.value();
        let c = col.value();
        let (m, n) = x.shape();
        assert_eq!(c.shape(), (m, 1), "col broadcast shape");
        let v = Tensor::from_fn(m, n, |r, cc| x.get(r, cc) + c.get(r, 0));
        self.binary(
            col,
            v,
            |g, acc| acc_add(acc, g.data()),
            move |g, acc| {
                for r in 0..m {
                    acc[r] = acc[r] + E::from_f64(E::sum_slice(g.row_slice(r)));
                }
            },
        )
    }

    /// Multiply row `r` of `self[m, n]` by `scale[r, 0]`.
    pub fn scale_rows(self, scale: Self) -> Self {
        let x = self.value();
        let s = scale.value();
        let (m, n) = x.shape();
        assert_eq!(s.shape(), (m, 1), "row scale shape");
        let v = Tensor::from_fn(m, n, |r, c| x.get(r, c) * s.get(r, 0));
        let (x2, s2) = (x.clone(), s.clone());
        self.binary(
            scale,
            v,
            move |g, acc| {
                for r in 0..m {
                    let si = s2.get(r, 0);
                    let arow = &mut acc[r * n..(r + 1) * n];
                    for (a, &gi) in arow.iter_mut().zip(g.row_slice(r)) {
                        *a = *a + gi * si;
                    }
                }
            },
            move |g, acc| {
                for r in 0..m {
                    let acc_r: f64 = g
                        .row_slice(r)
                        .iter()
                        .zip(x2.row_slice(r))
                        .fold(0.0, |s, (&gi, &xi)| s + (gi * xi).to_f64());
                    acc[r] = acc[r] + E::from_f64(acc_r);
                }
            },
        )
    }

    /// Multiply the whole tensor by a learnable scalar `[1, 1]`.
    pub fn scale_by(self, s: Self) -> Self {
        let x = self.value();
        let sv = s.value().item();
        let v = x.map(|xi| xi * sv);
        let x2 = x.clone();
        self.binary(
            s,
            v,
            move |g, acc| {
                for (a, &gi) in acc.iter_mut().zip(g.data()) {
                    *a = *a + gi * sv;
                }
            },
            move |g, acc| {
                let total: f64 =
                    g.data().iter().zip(x2.data()).fold(0.0, |s, (&gi, &xi)| s + (gi * xi).to_f64());
                acc[0] = acc[0] + E::from_f64(total);
            },
        )
    }

    /// Add a learnable scalar `[1, 1]` to every element.
    pub fn shift_by(self, s: Self) -> Self {
        let x = self.value();
        let sv = s.value().item();
        let v = x.map(|xi| xi + sv);
        self.binary(
            s,
            v,
            |g, acc| acc_add(acc, g.data()),
            move |g, acc| {
                acc[0] = acc[0] + E::from_f64(E::sum_slice(g.data()));
            },
        )
    }
}

/// Concatenate vars along rows (all must share column count).
pub fn concat_rows<'t, E: Elem>(parts: &[Var<'t, E>]) -> Var<'t, E> {
    assert!(!parts.is_empty(), "concat_rows of zero parts");
    let tape = parts[0].tape;
    let n = parts[0].shape().1;
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(parts.len() + 1);
    offsets.push(0usize);
    for p in parts {
        assert!(std::ptr::eq(tape, p.tape), "vars from different tapes");
        let v = p.value();
        assert_eq!(v.cols(), n, "concat_rows column mismatch");
        data.extend_from_slice(v.data());
        offsets.push(offsets.last().unwrap() + v.rows());
    }
    let total = *offsets.last().unwrap();
    let value = Tensor::new(total, n, data);
    let mut edges = Vec::new();
    for (i, p) in parts.iter().enumerate() {
        if !p.needs_grad() {
            continue;
        }
        let (r0, r1) = (offsets[i], offsets[i + 1]);
        edges.push(Edge {
            parent: p.idx,
            vjp: Box::new(move |g: &Tensor<E>, acc: &mut [E]| {
                acc_add(acc, &g.data()[r0 * n..r1 * n]);
            }),
        });
    }
    let needs = !edges.is_empty();
    tape.push(value, edges, needs)
}

/// Concatenate vars along columns (all must share row count).
pub fn concat_cols<'t, E: Elem>(parts: &[Var<'t, E>]) -> Var<'t, E> {
    assert!(!parts.is_empty(), "concat_cols of zero parts");
    let tape = parts[0].tape;
    let m = parts[0].shape().0;
    let widths: Vec<usize> = parts
        .iter()
        .map(|p| {
            assert!(std::ptr::eq(tape, p.tape), "vars from different tapes");
            let v = p.value();
            assert_eq!(v.rows(), m, "concat_cols row mismatch");
            v.cols()
        })
        .collect();
    let total: usize = widths.iter().sum();
    let values: Vec<Tensor<E>> = parts.iter().map(|p| p.value()).collect();
    let mut data = Vec::with_capacity(m * total);
    for r in 0..m {
        for v in &values {
            data.extend_from_slice(v.row_slice(r));
        }
    }
    let value = Tensor::new(m, total, data);
    let mut edges = Vec::new();
    let mut c0 = 0usize;
    for (p, &w) in parts.iter().zip(&widths) {
        if p.needs_grad() {
            let start = c0;
            edges.push(Edge {
                parent: p.idx,
                vjp: Box::new(move |g: &Tensor<E>, acc: &mut [E]| {
                    for r in 0..m {
                        let grow = &g.row_slice(r)[start..start + w];
                        acc_add(&mut acc[r * w..(r + 1) * w], grow);
                    }
                }),
            });
        }
        c0 += w;
    }
    let needs = !edges.is_empty();
    tape.push(value, edges, needs)
}

fn sigmoid_scalar<E: Elem>(x: E) -> E {
    // Split on sign so exp never overflows.
    if x >= E::ZERO {
        E::ONE / (E::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (E::ONE + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tensor::Tensor;
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        let loss = x.mul(x).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::row(&[3.0, -1.0, 0.5]));
        let loss = x.sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_subgraph_gets_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::row(&[1.0]));
        let c = tape.constant(Tensor::row(&[5.0]));
        let loss = x.mul(c).sum();
        let grads = tape.backward(loss);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn non_scalar_loss_panics() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::row(&[1.0, 2.0]));
        let y = x.exp();
        let _ = tape.backward(y);
    }

    #[test]
    fn shared_node_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        // f = x*x + x => f' = 2x + 1 = 7
        let loss = x.mul(x).add(x).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn matmul_chain_matches_hand_gradient() {
        // loss = sum(A*B), dA = ones*B^T, dB = A^T*ones
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let loss = a.matmul(b).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn slice_gradients_accumulate_in_place() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        // loss touches rows 0..2 and 1..3; row 1 gets two contributions
        let a = x.slice_rows(0, 2).sum();
        let b = x.slice_rows(1, 3).mul_scalar(2.0).sum();
        let loss = a.add(b);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 3.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_seeded_continues_from_cotangents() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::row(&[2.0, 3.0]));
        let y = x.mul(x); // dy/dx = 2x
        let seed = Tensor::row(&[10.0, 100.0]);
        let grads = tape.backward_seeded(&[(y, seed)]);
        assert_eq!(grads.get(x).unwrap().data(), &[40.0, 600.0]);
    }
}

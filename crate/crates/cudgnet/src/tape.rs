//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Values are `f64` [`ndarray::ArrayD`]s. A [`Tape`] records one forward
//! computation; [`Tape::backward`] walks it once in reverse and returns the
//! gradient of a scalar root with respect to every node that requires one.
//! Tapes are rebuilt every training step (dynamic graph), which is what lets
//! the trainer freeze parameter groups per phase simply by binding them as
//! non-differentiable leaves.
//!
//! Only the operations this crate needs exist here; each op's backward is
//! hand-written and checked against finite differences in the test suite.

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn};
use rayon::prelude::*;

pub type Arr = ArrayD<f64>;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Backward closure: (upstream grad, parent values, own value) -> parent grads.
pub type BackwardFn = Box<dyn Fn(&Arr, &[&Arr], &Arr) -> Vec<Arr> + Send + Sync>;

struct Node {
    value: Arr,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by tape node, produced by [`Tape::backward`].
pub struct Grads {
    by_node: Vec<Option<Arr>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.by_node.get_mut(v.0).and_then(|g| g.take())
    }
}

pub fn scalar(v: f64) -> Arr {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf. `needs_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, value: Arr, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(scalar(v))
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        *a.iter().next().unwrap()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an externally defined op (used by kernels with bespoke
    /// gradient routing, e.g. EFDMix).
    pub fn push_custom(&mut self, value: Arr, parents: Vec<Var>, backward: BackwardFn) -> Var {
        self.push(value, parents.into_iter().map(|v| v.0).collect(), backward)
    }

    fn push(&mut self, value: Arr, parents: Vec<usize>, backward: BackwardFn) -> Var {
        let needs = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node {
            value,
            parents,
            backward: if needs { Some(backward) } else { None },
            needs_grad: needs,
        });
        Var(self.nodes.len() - 1)
    }

    /// Backpropagate from a scalar root. Returns per-node gradients for every
    /// node reachable from `root` that requires a gradient.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.len(),
            1,
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Arr::ones(self.nodes[root.0].value.raw_dim()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if let Some(back) = &node.backward {
                let parent_vals: Vec<&Arr> =
                    node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let parent_grads = back(&gout, &parent_vals, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !self.nodes[p].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        self.nodes[p].value.shape(),
                        "gradient shape mismatch at node {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
                grads[i] = Some(gout); // keep for leaf queries through Grads
            } else {
                grads[i] = Some(gout);
            }
        }
        // Drop intermediates that nobody will query to keep Grads small(ish).
        Grads { by_node: grads }
    }

    // ---- elementwise arithmetic ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), g.mapv(|x| -x)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, pv, _| vec![g * pv[1], g * pv[0]]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + s);
        self.push(v, vec![a.0], Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * s);
        self.push(v, vec![a.0], Box::new(move |g, _, _| vec![g.mapv(|x| x * s)]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    /// Elementwise multiply by a constant array of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Arr) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), c.shape());
        let v = &self.nodes[a.0].value * &c;
        self.push(v, vec![a.0], Box::new(move |g, _, _| vec![g * &c]))
    }

    pub fn add_const(&mut self, a: Var, c: Arr) -> Var {
        assert_eq!(self.nodes[a.0].value.shape(), c.shape());
        let v = &self.nodes[a.0].value + &c;
        self.push(v, vec![a.0], Box::new(|g, _, _| vec![g.clone()]))
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| vec![g * &pv[0].mapv(|x| 2.0 * x)]),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, vec![a.0], Box::new(|g, _, out| vec![g * out]))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| vec![g * &pv[0].mapv(|x| 1.0 / x)]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| vec![g * &pv[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        // numerically stable: max(x,0) + ln(1 + exp(-|x|))
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| vec![g * &pv[0].mapv(stable_sigmoid)]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(stable_sigmoid);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, _, out| vec![g * &out.mapv(|s| s * (1.0 - s))]),
        )
    }

    /// min(x, cap); gradient passes only where x < cap.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.min(cap));
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, pv, _| {
                vec![g * &pv[0].mapv(|x| if x < cap { 1.0 } else { 0.0 })]
            }),
        )
    }

    /// Forward the value, block the gradient.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.constant(v)
    }

    // ---- reductions / broadcasts ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = scalar(self.nodes[a.0].value.sum());
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| {
                let gs = *g.iter().next().unwrap();
                vec![Arr::from_elem(pv[0].raw_dim(), gs)]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Row sums: (B, D) -> (B,)
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let a2 = as2(&self.nodes[a.0].value);
        let v = a2.sum_axis(Axis(1)).into_dyn();
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| {
                let (b, d) = as2(pv[0]).dim();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut out = ArrayD::zeros(pv[0].raw_dim());
                {
                    let mut o2 = out.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for i in 0..b {
                        for j in 0..d {
                            o2[[i, j]] = g1[i];
                        }
                    }
                }
                vec![out]
            }),
        )
    }

    /// Elementwise reciprocal (1/x).
    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| vec![g * &pv[0].mapv(|x| -1.0 / (x * x))]),
        )
    }

    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| (x + eps).sqrt());
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, pv, _| vec![g * &pv[0].mapv(|x| 0.5 / (x + eps).sqrt())]),
        )
    }

    /// Scale each slice along axis 0 by the matching entry of `s` (a Var of
    /// shape (B,)). Works for any rank ≥ 1 of `a`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let sv = &self.nodes[s.0].value;
        assert_eq!(av.shape()[0], sv.len());
        let mut v = av.clone();
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            let c = sv[[i]];
            row.mapv_inplace(|x| x * c);
        }
        self.push(
            v,
            vec![a.0, s.0],
            Box::new(|g, pv, _| {
                let b = pv[0].shape()[0];
                let mut ga = g.clone();
                let mut gs = Arr::zeros(IxDyn(&[b]));
                for i in 0..b {
                    let c = pv[1][[i]];
                    let mut row = ga.index_axis_mut(Axis(0), i);
                    row.mapv_inplace(|x| x * c);
                    let dot = (&g.index_axis(Axis(0), i) * &pv[0].index_axis(Axis(0), i)).sum();
                    gs[[i]] = dot;
                }
                vec![ga, gs]
            }),
        )
    }

    /// Same as [`Tape::scale_rows`] but with a constant vector (no gradient to it).
    pub fn scale_rows_const(&mut self, a: Var, s: Vec<f64>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape()[0], s.len());
        let mut v = av.clone();
        for (i, mut row) in v.axis_iter_mut(Axis(0)).enumerate() {
            let c = s[i];
            row.mapv_inplace(|x| x * c);
        }
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, _, _| {
                let mut ga = g.clone();
                for (i, mut row) in ga.axis_iter_mut(Axis(0)).enumerate() {
                    let c = s[i];
                    row.mapv_inplace(|x| x * c);
                }
                vec![ga]
            }),
        )
    }

    // ---- per-channel ops on (B, C, H, W) with (C,) companions ----

    /// Per-channel mean over batch and spatial axes: (B,C,H,W) -> (C,)
    pub fn mean_bchw(&mut self, a: Var) -> Var {
        let x = as4(&self.nodes[a.0].value);
        let (b, c, h, w) = x.dim();
        let n = (b * h * w) as f64;
        let mut m = ArrayD::zeros(IxDyn(&[c]));
        for ci in 0..c {
            m[[ci]] = x.index_axis(Axis(1), ci).sum() / n;
        }
        self.push(
            m,
            vec![a.0],
            Box::new(move |g, pv, _| {
                let mut out = ArrayD::zeros(pv[0].raw_dim());
                {
                    let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for ci in 0..c {
                        let gc = g[[ci]] / n;
                        o4.index_axis_mut(Axis(1), ci).fill(gc);
                    }
                }
                vec![out]
            }),
        )
    }

    /// x - m[c] broadcast over (B,C,H,W).
    pub fn sub_c(&mut self, a: Var, m: Var) -> Var {
        let v = bc_apply(&self.nodes[a.0].value, &self.nodes[m.0].value, |x, s| x - s);
        self.push(
            v,
            vec![a.0, m.0],
            Box::new(|g, _, _| {
                let gm = chan_sum(g).mapv(|x| -x);
                vec![g.clone(), gm]
            }),
        )
    }

    /// x * s[c] broadcast over (B,C,H,W).
    pub fn mul_c(&mut self, a: Var, s: Var) -> Var {
        let v = bc_apply(&self.nodes[a.0].value, &self.nodes[s.0].value, |x, c| x * c);
        self.push(
            v,
            vec![a.0, s.0],
            Box::new(|g, pv, _| {
                let ga = bc_apply(g, pv[1], |x, c| x * c);
                let gs = chan_sum(&(g * pv[0]));
                vec![ga, gs]
            }),
        )
    }

    /// x + b[c] broadcast over (B,C,H,W).
    pub fn add_c(&mut self, a: Var, b: Var) -> Var {
        let v = bc_apply(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, s| x + s);
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, _, _| vec![g.clone(), chan_sum(g)]),
        )
    }

    /// Global average pool: (B,C,H,W) -> (B,C)
    pub fn global_avg_pool(&mut self, a: Var) -> Var {
        let x = as4(&self.nodes[a.0].value);
        let (b, c, h, w) = x.dim();
        let n = (h * w) as f64;
        let mut out = ArrayD::zeros(IxDyn(&[b, c]));
        for bi in 0..b {
            for ci in 0..c {
                out[[bi, ci]] = x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() / n;
            }
        }
        self.push(
            out,
            vec![a.0],
            Box::new(move |g, pv, _| {
                let mut out = ArrayD::zeros(pv[0].raw_dim());
                {
                    let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for bi in 0..b {
                        for ci in 0..c {
                            o4.index_axis_mut(Axis(0), bi)
                                .index_axis_mut(Axis(0), ci)
                                .fill(g[[bi, ci]] / n);
                        }
                    }
                }
                vec![out]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            v,
            vec![a.0],
            Box::new(|g, pv, _| {
                vec![g
                    .clone()
                    .into_shape_with_order(pv[0].raw_dim())
                    .expect("reshape backward")]
            }),
        )
    }

    /// Concatenate along axis 0.
    pub fn concat0(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let v = ndarray::concatenate(Axis(0), &[av.view(), bv.view()]).unwrap();
        let na = av.shape()[0];
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(move |g, _, _| {
                let ga = g.slice_axis(Axis(0), ndarray::Slice::from(0..na)).to_owned();
                let gb = g.slice_axis(Axis(0), ndarray::Slice::from(na..)).to_owned();
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        )
    }

    /// Concatenate along axis 1 (feature axis of 2-D tensors).
    pub fn concat1(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let v = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).unwrap();
        let na = av.shape()[1];
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(move |g, _, _| {
                let ga = g.slice_axis(Axis(1), ndarray::Slice::from(0..na)).to_owned();
                let gb = g.slice_axis(Axis(1), ndarray::Slice::from(na..)).to_owned();
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        )
    }

    /// Permute along the batch axis: out[i] = x[perm[i]].
    pub fn permute_batch(&mut self, a: Var, perm: Vec<usize>) -> Var {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.shape()[0], perm.len());
        let mut v = ArrayD::zeros(av.raw_dim());
        for (i, &src) in perm.iter().enumerate() {
            v.index_axis_mut(Axis(0), i).assign(&av.index_axis(Axis(0), src));
        }
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, pv, _| {
                let mut out = ArrayD::zeros(pv[0].raw_dim());
                for (i, &src) in perm.iter().enumerate() {
                    let mut dst = out.index_axis_mut(Axis(0), src);
                    dst += &g.index_axis(Axis(0), i);
                }
                vec![out]
            }),
        )
    }

    /// Select one column of a (B, K) matrix: out[b] = x[b, k].
    pub fn slice_col(&mut self, a: Var, k: usize) -> Var {
        let a2 = as2(&self.nodes[a.0].value);
        let (b, _) = a2.dim();
        let mut v = ArrayD::zeros(IxDyn(&[b]));
        for i in 0..b {
            v[[i]] = a2[[i, k]];
        }
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, pv, _| {
                let mut out = ArrayD::zeros(pv[0].raw_dim());
                for i in 0..g.len() {
                    out[[i, k]] = g[[i]];
                }
                vec![out]
            }),
        )
    }

    /// Gather one entry per row of a square matrix: out[i] = x[i, idx[i]].
    pub fn take_pairs(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let a2 = as2(&self.nodes[a.0].value);
        let n = a2.dim().0;
        assert_eq!(n, idx.len());
        let mut v = ArrayD::zeros(IxDyn(&[n]));
        for i in 0..n {
            v[[i]] = a2[[i, idx[i]]];
        }
        self.push(
            v,
            vec![a.0],
            Box::new(move |g, pv, _| {
                let mut out = ArrayD::zeros(pv[0].raw_dim());
                for i in 0..g.len() {
                    out[[i, idx[i]]] = g[[i]];
                }
                vec![out]
            }),
        )
    }

    // ---- linear algebra ----

    /// (m,k) x (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let bv = as2(&self.nodes[b.0].value).to_owned();
        let v = av.dot(&bv).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, pv, _| {
                let g2 = as2(g);
                let a2 = as2(pv[0]);
                let b2 = as2(pv[1]);
                vec![g2.dot(&b2.t()).into_dyn(), a2.t().dot(&g2).into_dyn()]
            }),
        )
    }

    /// a · bᵀ : (m,k) x (n,k) -> (m,n)
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = as2(&self.nodes[a.0].value).to_owned();
        let bv = as2(&self.nodes[b.0].value).to_owned();
        let v = av.dot(&bv.t()).into_dyn();
        self.push(
            v,
            vec![a.0, b.0],
            Box::new(|g, pv, _| {
                let g2 = as2(g);
                let a2 = as2(pv[0]);
                let b2 = as2(pv[1]);
                vec![g2.dot(&b2).into_dyn(), g2.t().dot(&a2).into_dyn()]
            }),
        )
    }

    /// Fully connected: x (B,I) · w (O,I)ᵀ + b (O,) -> (B,O)
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_nt(x, w);
        match b {
            Some(bias) => {
                let yv = as2(&self.nodes[y.0].value);
                let bv = &self.nodes[bias.0].value;
                let mut v = yv.to_owned();
                for mut row in v.rows_mut() {
                    for (j, e) in row.iter_mut().enumerate() {
                        *e += bv[[j]];
                    }
                }
                self.push(
                    v.into_dyn(),
                    vec![y.0, bias.0],
                    Box::new(|g, _, _| {
                        let g2 = as2(g);
                        vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
                    }),
                )
            }
            None => y,
        }
    }

    /// 2-D convolution, zero padding, square stride. x (B,C,H,W), w (OC,C,KH,KW).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = as4(&self.nodes[x.0].value).to_owned();
        let wv = as4(&self.nodes[w.0].value).to_owned();
        let (bs, c, h, wd) = xv.dim();
        let (oc, wc, kh, kw) = wv.dim();
        assert_eq!(c, wc, "conv2d: channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let w2 = wv
            .clone()
            .into_shape_with_order((oc, c * kh * kw))
            .unwrap();
        let outs: Vec<ndarray::Array2<f64>> = (0..bs)
            .into_par_iter()
            .map(|bi| {
                let col = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
                w2.dot(&col)
            })
            .collect();
        let mut v = ArrayD::zeros(IxDyn(&[bs, oc, oh, ow]));
        for (bi, o) in outs.into_iter().enumerate() {
            let o4 = o.into_shape_with_order((oc, oh, ow)).unwrap();
            v.index_axis_mut(Axis(0), bi)
                .assign(&o4.into_dyn().view());
        }

        let conv = self.push(
            v,
            vec![x.0, w.0],
            Box::new(move |g, pv, _| {
                let xv = as4(pv[0]);
                let wv = as4(pv[1]);
                let (bs, c, h, wd) = xv.dim();
                let (oc, _, kh, kw) = wv.dim();
                let g4 = as4(g);
                let (_, _, oh, ow) = g4.dim();
                let w2 = wv.to_owned().into_shape_with_order((oc, c * kh * kw)).unwrap();

                // per-sample GEMMs; im2col recomputed to bound memory
                let per: Vec<(ndarray::Array2<f64>, ndarray::Array3<f64>)> = (0..bs)
                    .into_par_iter()
                    .map(|bi| {
                        let col = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
                        let gb = g4
                            .index_axis(Axis(0), bi)
                            .to_owned()
                            .into_shape_with_order((oc, oh * ow))
                            .unwrap();
                        let gw = gb.dot(&col.t());
                        let gcol = w2.t().dot(&gb);
                        let gx = col2im(&gcol, c, h, wd, kh, kw, stride, pad, oh, ow);
                        (gw, gx)
                    })
                    .collect();

                let mut gw_total = ndarray::Array2::<f64>::zeros((oc, c * kh * kw));
                let mut gx = ArrayD::zeros(pv[0].raw_dim());
                for (bi, (gw, gxb)) in per.into_iter().enumerate() {
                    gw_total += &gw;
                    gx.index_axis_mut(Axis(0), bi).assign(&gxb.into_dyn().view());
                }
                let gw = gw_total
                    .into_shape_with_order((oc, c, kh, kw))
                    .unwrap()
                    .into_dyn();
                vec![gx, gw]
            }),
        );

        match b {
            Some(bias) => {
                let bv = self.nodes[bias.0].value.clone();
                let mut v = self.nodes[conv.0].value.clone();
                {
                    let mut v4 = v.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for ci in 0..oc {
                        let add = bv[[ci]];
                        v4.index_axis_mut(Axis(1), ci).mapv_inplace(|x| x + add);
                    }
                }
                self.push(
                    v,
                    vec![conv.0, bias.0],
                    Box::new(|g, _, _| vec![g.clone(), chan_sum(g)]),
                )
            }
            None => conv,
        }
    }

    /// Mean soft-label cross-entropy with logits: -(1/B) Σ_b Σ_k y·log softmax.
    /// Targets are constants (no gradient path to them).
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Arr) -> Var {
        let l2 = as2(&self.nodes[logits.0].value).to_owned();
        let t2 = as2(&targets).to_owned();
        assert_eq!(l2.dim(), t2.dim());
        let (b, _k) = l2.dim();
        let mut loss = 0.0;
        for (lrow, trow) in l2.rows().into_iter().zip(t2.rows()) {
            let m = lrow.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
            let lse = m + lrow.mapv(|x| (x - m).exp()).sum().ln();
            let dot: f64 = lrow.iter().zip(trow.iter()).map(|(&l, &y)| l * y).sum();
            let ysum: f64 = trow.sum();
            loss += lse * ysum - dot;
        }
        loss /= b as f64;
        self.push(
            scalar(loss),
            vec![logits.0],
            Box::new(move |g, pv, _| {
                let gs = *g.iter().next().unwrap();
                let l2 = as2(pv[0]);
                let (b, k) = l2.dim();
                let mut out = ndarray::Array2::<f64>::zeros((b, k));
                for (i, lrow) in l2.rows().into_iter().enumerate() {
                    let m = lrow.fold(f64::NEG_INFINITY, |a, &x| a.max(x));
                    let ex = lrow.mapv(|x| (x - m).exp());
                    let z = ex.sum();
                    let ysum: f64 = t2.row(i).sum();
                    for j in 0..k {
                        out[[i, j]] = gs * (ex[j] / z * ysum - t2[[i, j]]) / b as f64;
                    }
                }
                vec![out.into_dyn()]
            }),
        )
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-D")
}

fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-D")
}

/// Apply `f(x, per_channel)` across a (B,C,H,W) tensor with a (C,) companion.
fn bc_apply(x: &Arr, s: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let x4 = as4(x);
    let (b, c, h, w) = x4.dim();
    let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
    {
        let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
        for ci in 0..c {
            let sv = s[[ci]];
            let src = x4.index_axis(Axis(1), ci);
            let mut dst = o4.index_axis_mut(Axis(1), ci);
            dst.assign(&src.mapv(|v| f(v, sv)));
        }
    }
    out
}

/// Sum a (B,C,H,W) tensor over batch and spatial axes -> (C,)
fn chan_sum(g: &Arr) -> Arr {
    let g4 = as4(g);
    let c = g4.dim().1;
    let mut out = ArrayD::zeros(IxDyn(&[c]));
    for ci in 0..c {
        out[[ci]] = g4.index_axis(Axis(1), ci).sum();
    }
    out
}

fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array2<f64> {
    let (c, h, w) = x.dim();
    let mut col = ndarray::Array2::<f64>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        col[[row, oi * ow + oj]] = x[[ci, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    col: &ndarray::Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ci * kh * kw + ki * kw + kj;
                for oi in 0..oh {
                    let ih = (oi * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for oj in 0..ow {
                        let iw = (oj * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        x[[ci, ih as usize, iw as usize]] += col[[row, oi * ow + oj]];
                    }
                }
            }
        }
    }
    x
}

/// All-pairs view helper used by tests and loss oracles: central finite
/// difference gradient of `f` at `x`.
pub fn finite_difference_grad(f: &mut dyn FnMut(&Arr) -> f64, x: &Arr, h: f64) -> Arr {
    let mut g = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[&idx];
        xp[&idx] = orig + h;
        let fp = f(&xp);
        xp[&idx] = orig - h;
        let fm = f(&xp);
        xp[&idx] = orig;
        g[&idx] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array1, Array2, Array4};
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn randn(rng: &mut Pcg64, shape: &[usize]) -> Arr {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-9..1.0);
                let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (-2.0 * u1.ln()).sqrt() * u2.cos()
            })
            .collect();
        Array::from_shape_vec(IxDyn(shape), data).unwrap()
    }

    /// Check tape gradient of a scalar-valued builder against finite differences.
    fn check_grad(
        shape_a: &[usize],
        build: impl Fn(&mut Tape, Var) -> Var,
        tol: f64,
        seed: u64,
    ) {
        let mut rng = Pcg64::seed_from_u64(seed);
        let x0 = randn(&mut rng, shape_a);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let y = build(&mut tape, x);
        let grads = tape.backward(y);
        let analytic = grads.get(x).expect("missing grad").clone();

        let mut f = |xv: &Arr| {
            let mut t = Tape::new();
            let v = t.leaf(xv.clone(), false);
            let out = build(&mut t, v);
            t.scalar_value(out)
        };
        let numeric = finite_difference_grad(&mut f, &x0, 1e-5);
        let max_err = (&analytic - &numeric)
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(
            max_err < tol,
            "gradient mismatch: max err {max_err:.3e} > {tol:.1e}"
        );
    }

    #[test]
    fn elementwise_grads_match_fd() {
        check_grad(
            &[3, 4],
            |t, x| {
                let a = t.relu(x);
                let b = t.softplus(a);
                let c = t.sigmoid(b);
                let d = t.sqr(c);
                let e = t.mul_scalar(d, 3.0);
                t.mean_all(e)
            },
            1e-6,
            1,
        );
        check_grad(
            &[5],
            |t, x| {
                let e = t.exp(x);
                let l = t.add_scalar(e, 1.0);
                let ln = t.ln(l);
                t.sum_all(ln)
            },
            1e-6,
            2,
        );
    }

    #[test]
    fn binary_and_reduction_grads_match_fd() {
        check_grad(
            &[4, 3],
            |t, x| {
                let c = t.constant(Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64 * 0.3).into_dyn());
                let m = t.mul(x, c);
                let s = t.sub(m, x);
                let a = t.add(s, x);
                let r = t.sum_rows(a);
                let q = t.sqr(r);
                t.mean_all(q)
            },
            1e-6,
            3,
        );
    }

    #[test]
    fn matmul_grads_match_fd() {
        check_grad(
            &[3, 4],
            |t, x| {
                let w = t.constant(Array2::from_shape_fn((4, 2), |(i, j)| 0.1 * (i as f64) - 0.2 * j as f64).into_dyn());
                let y = t.matmul(x, w);
                let s = t.sqr(y);
                t.sum_all(s)
            },
            1e-5,
            4,
        );
        check_grad(
            &[2, 5],
            |t, x| {
                let w = t.constant(Array2::from_shape_fn((3, 5), |(i, j)| 0.05 * (i * j) as f64 + 0.1).into_dyn());
                let y = t.matmul_nt(x, w);
                t.mean_all(y)
            },
            1e-6,
            5,
        );
    }

    #[test]
    fn linear_grads_match_fd_for_all_inputs() {
        let mut rng = Pcg64::seed_from_u64(6);
        let x0 = randn(&mut rng, &[3, 4]);
        let w0 = randn(&mut rng, &[2, 4]);
        let b0 = randn(&mut rng, &[2]);

        let run = |x: &Arr, w: &Arr, b: &Arr| -> (f64, Arr, Arr, Arr) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone(), true);
            let wv = t.leaf(w.clone(), true);
            let bv = t.leaf(b.clone(), true);
            let y = t.linear(xv, wv, Some(bv));
            let s = t.sqr(y);
            let loss = t.mean_all(s);
            let g = t.backward(loss);
            (
                t.scalar_value(loss),
                g.get(xv).unwrap().clone(),
                g.get(wv).unwrap().clone(),
                g.get(bv).unwrap().clone(),
            )
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0);

        for (target, analytic) in [(0usize, &gx), (1, &gw), (2, &gb)] {
            let mut f = |v: &Arr| {
                let (x, w, b) = match target {
                    0 => (v.clone(), w0.clone(), b0.clone()),
                    1 => (x0.clone(), v.clone(), b0.clone()),
                    _ => (x0.clone(), w0.clone(), v.clone()),
                };
                run(&x, &w, &b).0
            };
            let base = match target {
                0 => &x0,
                1 => &w0,
                _ => &b0,
            };
            let numeric = finite_difference_grad(&mut f, base, 1e-5);
            let err = (analytic - &numeric).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-5, "linear grad target {target}: err {err:.2e}");
        }
    }

    #[test]
    fn conv2d_grads_match_fd() {
        let mut rng = Pcg64::seed_from_u64(7);
        let x0 = randn(&mut rng, &[2, 3, 5, 5]);
        let w0 = randn(&mut rng, &[4, 3, 3, 3]);
        let b0 = randn(&mut rng, &[4]);

        let run = |x: &Arr, w: &Arr, b: &Arr| -> (f64, Arr, Arr, Arr) {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone(), true);
            let wv = t.leaf(w.clone(), true);
            let bv = t.leaf(b.clone(), true);
            let y = t.conv2d(xv, wv, Some(bv), 2, 1);
            let s = t.sqr(y);
            let loss = t.mean_all(s);
            let g = t.backward(loss);
            (
                t.scalar_value(loss),
                g.get(xv).unwrap().clone(),
                g.get(wv).unwrap().clone(),
                g.get(bv).unwrap().clone(),
            )
        };
        let (_, gx, gw, gb) = run(&x0, &w0, &b0);
        for (target, analytic, base) in [(0usize, &gx, &x0), (1, &gw, &w0), (2, &gb, &b0)] {
            let mut f = |v: &Arr| {
                let (x, w, b) = match target {
                    0 => (v.clone(), w0.clone(), b0.clone()),
                    1 => (x0.clone(), v.clone(), b0.clone()),
                    _ => (x0.clone(), w0.clone(), v.clone()),
                };
                run(&x, &w, &b).0
            };
            let numeric = finite_difference_grad(&mut f, base, 1e-5);
            let err = (analytic - &numeric).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-5, "conv grad target {target}: err {err:.2e}");
        }
    }

    #[test]
    fn conv2d_matches_direct_convolution() {
        let mut rng = Pcg64::seed_from_u64(8);
        let x0 = randn(&mut rng, &[1, 2, 4, 4]);
        let w0 = randn(&mut rng, &[3, 2, 3, 3]);
        let mut t = Tape::new();
        let x = t.constant(x0.clone());
        let w = t.constant(w0.clone());
        let y = t.conv2d(x, w, None, 1, 1);
        let yv = t.value(y).clone();

        let x4 = x0.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = w0.view().into_dimensionality::<Ix4>().unwrap();
        let mut expect = Array4::<f64>::zeros((1, 3, 4, 4));
        for oc in 0..3 {
            for oi in 0..4usize {
                for oj in 0..4usize {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for ki in 0..3usize {
                            for kj in 0..3usize {
                                let ih = oi as isize + ki as isize - 1;
                                let iw = oj as isize + kj as isize - 1;
                                if !(0..4).contains(&ih) || !(0..4).contains(&iw) {
                                    continue;
                                }
                                acc += x4[[0, c, ih as usize, iw as usize]] * w4[[oc, c, ki, kj]];
                            }
                        }
                    }
                    expect[[0, oc, oi, oj]] = acc;
                }
            }
        }
        let err = (&yv - &expect.into_dyn()).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-12, "direct conv mismatch: {err:.2e}");
    }

    #[test]
    fn channel_ops_and_pool_grads_match_fd() {
        check_grad(
            &[2, 3, 4, 4],
            |t, x| {
                let m = t.mean_bchw(x);
                let xc = t.sub_c(x, m);
                let sq = t.sqr(xc);
                let v = t.mean_bchw(sq);
                let inv = t.sqrt_eps(v, 1e-5);
                let rinv = t.recip(inv);
                let xn = t.mul_c(xc, rinv);
                let p = t.global_avg_pool(xn);
                let s = t.sqr(p);
                t.sum_all(s)
            },
            1e-5,
            9,
        );
    }

    #[test]
    fn softmax_cross_entropy_grad_matches_fd() {
        let mut rng = Pcg64::seed_from_u64(10);
        let y = {
            let mut t = Array2::<f64>::zeros((3, 5));
            t[[0, 1]] = 1.0;
            t[[1, 0]] = 0.7;
            t[[1, 4]] = 0.3;
            t[[2, 2]] = 1.0;
            t.into_dyn()
        };
        let x0 = randn(&mut rng, &[3, 5]);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let loss = tape.softmax_cross_entropy(x, y.clone());
        let g = tape.backward(loss);
        let analytic = g.get(x).unwrap().clone();

        let mut f = |v: &Arr| {
            let mut t = Tape::new();
            let xv = t.leaf(v.clone(), false);
            let l = t.softmax_cross_entropy(xv, y.clone());
            t.scalar_value(l)
        };
        let numeric = finite_difference_grad(&mut f, &x0, 1e-6);
        let err = (&analytic - &numeric).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-6, "ce grad err {err:.2e}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Array1::from(vec![1.0, 2.0]).into_dyn(), true);
        let d = t.detach(x);
        let y = t.mul(x, d); // y = x * stopgrad(x)
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        // d/dx (x * const(x)) = const(x), not 2x
        let gx = g.get(x).unwrap();
        assert_eq!(gx.as_slice().unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn scale_and_permute_and_pairs_grads_match_fd() {
        check_grad(
            &[3, 4],
            |t, x| {
                let s = t.constant(Array1::from(vec![0.5, -1.0, 2.0]).into_dyn());
                let y = t.scale_rows(x, s);
                let p = t.permute_batch(y, vec![2, 0, 1]);
                let q = t.sqr(p);
                t.sum_all(q)
            },
            1e-6,
            11,
        );
        check_grad(
            &[3, 3],
            |t, x| {
                let tp = t.take_pairs(x, vec![1, 2, 0]);
                let s = t.sqr(tp);
                t.sum_all(s)
            },
            1e-6,
            12,
        );
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Array1::from(vec![1.0, 2.0]).into_dyn(), true);
        let b = t.leaf(Array1::from(vec![3.0, 4.0]).into_dyn(), false);
        let y = t.mul(a, b);
        let loss = t.sum_all(y);
        let g = t.backward(loss);
        assert!(g.get(a).is_some());
        assert!(g.get(b).is_none());
    }
}

//! Reverse-mode autodiff over [`Tensor`]s.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; `backward`
//! walks it in reverse accumulating vector-Jacobian products. Parents always
//! precede children, so the sweep splits the gradient buffer at the current
//! node and hands the closure the parent slice mutably.
//!
//! Built for desk-scale models: values are plain row-major matrices, every op
//! materializes its output, and a fresh tape is recorded per step.

use crate::scalar::{fl, fu, Scalar};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<F> = Box<dyn Fn(&[Tensor<F>], &Tensor<F>, &mut [Tensor<F>]) + Send>;

pub struct Tape<F: Scalar> {
    values: Vec<Tensor<F>>,
    backs: Vec<Option<BackFn<F>>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<F: Scalar>(Vec<Tensor<F>>);

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> &Tensor<F> {
        &self.0[v.0]
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that skips recording backward closures (synthesis / evaluation).
    pub fn inference() -> Self {
        Tape {
            values: Vec::new(),
            backs: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn item(&self, v: Var) -> F {
        self.values[v.0].item()
    }

    fn push(&mut self, value: Tensor<F>, back: Option<BackFn<F>>) -> Var {
        self.values.push(value);
        self.backs.push(if self.grad_enabled { back } else { None });
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.push(t, None)
    }

    /// Alias for `leaf` used where the operand is data, not a parameter.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t)
    }

    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(
            self.values[root.0].shape(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut grads: Vec<Tensor<F>> = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.rows(), v.cols()))
            .collect();
        grads[root.0].fill(F::one());
        for i in (0..=root.0).rev() {
            if let Some(back) = &self.backs[i] {
                let (parents, rest) = grads.split_at_mut(i);
                back(&self.values, &rest[0], parents);
            }
        }
        Grads(grads)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.shape(), vb.shape(), "add shapes");
        let mut out = va.clone();
        out.add_assign_scaled(vb, F::one());
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                gp[a.0].add_assign_scaled(g, F::one());
                gp[b.0].add_assign_scaled(g, F::one());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.shape(), vb.shape(), "sub shapes");
        let mut out = va.clone();
        out.add_assign_scaled(vb, -F::one());
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                gp[a.0].add_assign_scaled(g, F::one());
                gp[b.0].add_assign_scaled(g, -F::one());
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.shape(), vb.shape(), "mul shapes");
        let mut out = va.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(vb.data()) {
            *o = *o * y;
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let (va, vb) = (vals[a.0].clone(), vals[b.0].clone());
                for ((ga, &gv), &y) in gp[a.0].data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *ga += gv * y;
                }
                for ((gb, &gv), &x) in gp[b.0].data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *gb += gv * x;
                }
            })),
        )
    }

    /// k·x + c elementwise.
    pub fn affine(&mut self, a: Var, k: F, c: F) -> Var {
        let out = self.values[a.0].map(|x| k * x + c);
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                gp[a.0].add_assign_scaled(g, k);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        self.affine(a, k, F::zero())
    }

    /// x (L×H) + bias (1×H) broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (&self.values[x.0], &self.values[bias.0]);
        assert_eq!(vb.rows(), 1, "bias is a row vector");
        assert_eq!(vx.cols(), vb.cols(), "bias width");
        let brow = vb.row(0).to_vec();
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(&brow) {
                *o = *o + bv;
            }
        }
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                gp[x.0].add_assign_scaled(g, F::one());
                let gb = &mut gp[bias.0];
                for r in 0..g.rows() {
                    for (b, &gv) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                        *b += gv;
                    }
                }
            })),
        )
    }

    // ---- matrix products ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].matmul(&self.values[b.0]);
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let da = g.matmul_nt(&vals[b.0]);
                gp[a.0].add_assign_scaled(&da, F::one());
                let db = vals[a.0].matmul_tn(g);
                gp[b.0].add_assign_scaled(&db, F::one());
            })),
        )
    }

    /// A · Bᵀ without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.values[a.0].matmul_nt(&self.values[b.0]);
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                let da = g.matmul(&vals[b.0]);
                gp[a.0].add_assign_scaled(&da, F::one());
                let db = g.matmul_tn(&vals[a.0]);
                gp[b.0].add_assign_scaled(&db, F::one());
            })),
        )
    }

    // ---- nonlinearities ----

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| x.tanh());
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let ga = &mut gp[a.0];
                for ((gx, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(vals[a.0].data())
                {
                    let t = x.tanh();
                    *gx += gv * (F::one() - t * t);
                }
            })),
        )
    }

    /// tanh-form GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c: F = fl(0.7978845608028654); // sqrt(2/pi)
        let k: F = fl(0.044715);
        let half: F = fl(0.5);
        let out = self.values[a.0].map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (F::one() + u.tanh())
        });
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let ga = &mut gp[a.0];
                for ((gx, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(vals[a.0].data())
                {
                    let u = c * (x + k * x * x * x);
                    let t = u.tanh();
                    let du = c * (F::one() + fl::<F>(3.0) * k * x * x);
                    let d = half * (F::one() + t) + half * x * (F::one() - t * t) * du;
                    *gx += gv * d;
                }
            })),
        )
    }

    /// Snake activation with unit frequency: x + sin²(x).
    pub fn snake(&mut self, a: Var) -> Var {
        let out = self.values[a.0].map(|x| {
            let s = x.sin();
            x + s * s
        });
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let ga = &mut gp[a.0];
                for ((gx, &gv), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(vals[a.0].data())
                {
                    *gx += gv * (F::one() + (x + x).sin());
                }
            })),
        )
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let mut out = Tensor::zeros(v.rows(), v.cols());
        for r in 0..v.rows() {
            softmax_into(v.row(r), out.row_mut(r));
        }
        let out_copy = out.clone();
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let ga = &mut gp[a.0];
                for r in 0..g.rows() {
                    let y = out_copy.row(r);
                    let gy = g.row(r);
                    let dot: F = y.iter().zip(gy).map(|(&yv, &gv)| yv * gv).sum();
                    for ((gx, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gy) {
                        *gx += yv * (gv - dot);
                    }
                }
            })),
        )
    }

    /// Per-row layer normalization with learned gain/bias (both 1×H).
    pub fn layernorm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Var {
        let v = &self.values[x.0];
        let (rows, cols) = v.shape();
        assert_eq!(self.values[gamma.0].shape(), (1, cols));
        assert_eq!(self.values[beta.0].shape(), (1, cols));
        let n: F = fu(cols);
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_sigma = vec![F::zero(); rows];
        {
            let gm = &self.values[gamma.0];
            let bt = &self.values[beta.0];
            for r in 0..rows {
                let row = v.row(r);
                let mean: F = row.iter().copied().sum::<F>() / n;
                let var: F = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
                let inv = (var + eps).sqrt().recip();
                inv_sigma[r] = inv;
                for c in 0..cols {
                    let xh = (row[c] - mean) * inv;
                    xhat.set(r, c, xh);
                    out.set(r, c, gm.at(0, c) * xh + bt.at(0, c));
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let gm = vals[gamma.0].clone();
                let n: F = fu(g.cols());
                for r in 0..g.rows() {
                    let gy = g.row(r);
                    let xh = xhat.row(r);
                    // accumulate gamma/beta grads
                    {
                        let gg = &mut gp[gamma.0];
                        for c in 0..g.cols() {
                            gg.row_mut(0)[c] += gy[c] * xh[c];
                        }
                    }
                    {
                        let gb = &mut gp[beta.0];
                        for c in 0..g.cols() {
                            gb.row_mut(0)[c] += gy[c];
                        }
                    }
                    // dx = (h − mean(h) − xh·mean(h⊙xh)) · inv_sigma, h = gamma⊙gy
                    let h: Vec<F> = (0..g.cols()).map(|c| gm.at(0, c) * gy[c]).collect();
                    let mean_h: F = h.iter().copied().sum::<F>() / n;
                    let mean_hx: F = h.iter().zip(xh).map(|(&a, &b)| a * b).sum::<F>() / n;
                    let gx = &mut gp[x.0];
                    for c in 0..g.cols() {
                        gx.row_mut(r)[c] += (h[c] - mean_h - xh[c] * mean_hx) * inv_sigma[r];
                    }
                }
            })),
        )
    }

    // ---- reductions & losses ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.values[a.0].data().iter().copied().sum();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_, g, gp| {
                let gv = g.item();
                for x in gp[a.0].data_mut() {
                    *x += gv;
                }
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n: F = fu(self.values[a.0].len());
        let s = self.sum_all(a);
        self.scale(s, n.recip())
    }

    /// Mean squared error against constant targets.
    pub fn mse_const(&mut self, a: Var, target: &Tensor<F>) -> Var {
        let v = &self.values[a.0];
        assert_eq!(v.shape(), target.shape(), "mse_const shapes");
        let n: F = fu(v.len());
        let mut s = F::zero();
        for (&x, &t) in v.data().iter().zip(target.data()) {
            let d = x - t;
            s += d * d;
        }
        let tgt = target.clone();
        self.push(
            Tensor::scalar(s / n),
            Some(Box::new(move |vals, g, gp| {
                let gv = g.item();
                let two_over_n = fl::<F>(2.0) / n;
                let ga = &mut gp[a.0];
                for ((gx, &x), &t) in ga.data_mut().iter_mut().zip(vals[a.0].data()).zip(tgt.data())
                {
                    *gx += gv * two_over_n * (x - t);
                }
            })),
        )
    }

    /// Mean squared error between two live variables.
    pub fn mse_var(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.shape(), vb.shape(), "mse_var shapes");
        let n: F = fu(va.len());
        let mut s = F::zero();
        for (&x, &y) in va.data().iter().zip(vb.data()) {
            let d = x - y;
            s += d * d;
        }
        self.push(
            Tensor::scalar(s / n),
            Some(Box::new(move |vals, g, gp| {
                let gv = g.item();
                let two_over_n = fl::<F>(2.0) / n;
                let (va, vb) = (vals[a.0].clone(), vals[b.0].clone());
                for ((gx, &x), &y) in gp[a.0]
                    .data_mut()
                    .iter_mut()
                    .zip(va.data())
                    .zip(vb.data())
                {
                    *gx += gv * two_over_n * (x - y);
                }
                for ((gy, &x), &y) in gp[b.0]
                    .data_mut()
                    .iter_mut()
                    .zip(va.data())
                    .zip(vb.data())
                {
                    *gy += gv * two_over_n * (y - x);
                }
            })),
        )
    }

    /// −(1/N) Σ_i log max(p[i, label_i], eps) over probability rows.
    pub fn ce_rows(&mut self, probs: Var, labels: &[usize], eps: F) -> Var {
        let v = &self.values[probs.0];
        assert_eq!(v.rows(), labels.len(), "ce_rows label count");
        let n: F = fu(labels.len());
        let mut s = F::zero();
        for (i, &l) in labels.iter().enumerate() {
            s -= v.at(i, l).max(eps).ln();
        }
        let labels = labels.to_vec();
        self.push(
            Tensor::scalar(s / n),
            Some(Box::new(move |vals, g, gp| {
                let gv = g.item();
                let v = vals[probs.0].clone();
                let gpb = &mut gp[probs.0];
                for (i, &l) in labels.iter().enumerate() {
                    let p = v.at(i, l);
                    if p > eps {
                        let cur = gpb.at(i, l);
                        gpb.set(i, l, cur - gv / (n * p));
                    }
                }
            })),
        )
    }

    /// Per-position CPO weights from pause probabilities:
    /// w_i = α·p[i, label_i] for pause positions, β·p[i, 0] otherwise.
    pub fn label_prob_weights(&mut self, probs: Var, labels: &[usize], alpha: F, beta: F) -> Var {
        let v = &self.values[probs.0];
        assert_eq!(v.rows(), labels.len(), "weight label count");
        let mut out = Tensor::zeros(labels.len(), 1);
        for (i, &l) in labels.iter().enumerate() {
            let coef = if l > 0 { alpha } else { beta };
            out.set(i, 0, coef * v.at(i, l));
        }
        let labels = labels.to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let gpb = &mut gp[probs.0];
                for (i, &l) in labels.iter().enumerate() {
                    let coef = if l > 0 { alpha } else { beta };
                    let cur = gpb.at(i, l);
                    gpb.set(i, l, cur + coef * g.at(i, 0));
                }
            })),
        )
    }

    /// Per-position hinge max(0, |p−d| − |p−dⁿ| + m) on an N×1 column of
    /// predictions; subgradient 0 at kinks.
    pub fn cpo_hinge(&mut self, pred: Var, dys: &[F], normal: &[F], margin: F) -> Var {
        let v = &self.values[pred.0];
        assert_eq!(v.shape(), (dys.len(), 1), "cpo_hinge pred shape");
        assert_eq!(dys.len(), normal.len(), "cpo_hinge reference lengths");
        let mut out = Tensor::zeros(dys.len(), 1);
        for i in 0..dys.len() {
            let p = v.at(i, 0);
            let arg = (p - dys[i]).abs() - (p - normal[i]).abs() + margin;
            out.set(i, 0, arg.max(F::zero()));
        }
        let dys = dys.to_vec();
        let normal = normal.to_vec();
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let v = vals[pred.0].clone();
                let gx = &mut gp[pred.0];
                for i in 0..dys.len() {
                    let p = v.at(i, 0);
                    let arg = (p - dys[i]).abs() - (p - normal[i]).abs() + margin;
                    if arg > F::zero() {
                        let d = sign(p - dys[i]) - sign(p - normal[i]);
                        let cur = gx.at(i, 0);
                        gx.set(i, 0, cur + g.at(i, 0) * d);
                    }
                }
            })),
        )
    }

    // ---- structural ops ----

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = &self.values[x.0];
        let mut out = Tensor::zeros(idx.len(), v.cols());
        for (j, &i) in idx.iter().enumerate() {
            out.row_mut(j).copy_from_slice(v.row(i));
        }
        let idx = idx.to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let gx = &mut gp[x.0];
                for (j, &i) in idx.iter().enumerate() {
                    for (a, &b) in gx.row_mut(i).iter_mut().zip(g.row(j)) {
                        *a += b;
                    }
                }
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.values[parts[0].0].cols();
        let total: usize = parts.iter().map(|p| self.values[p.0].rows()).sum();
        let mut out = Tensor::zeros(total, cols);
        let mut r = 0;
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.cols(), cols, "concat_rows widths");
            for i in 0..v.rows() {
                out.row_mut(r).copy_from_slice(v.row(i));
                r += 1;
            }
        }
        let parts: Vec<(usize, usize)> = {
            let mut acc = Vec::with_capacity(parts.len());
            let mut r = 0;
            for p in parts {
                let n = self.values[p.0].rows();
                acc.push((p.0, r));
                r += n;
            }
            acc
        };
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                for &(pid, start) in &parts {
                    let n = gp[pid].rows();
                    for i in 0..n {
                        let grow = g.row(start + i).to_vec();
                        for (a, b) in gp[pid].row_mut(i).iter_mut().zip(grow) {
                            *a += b;
                        }
                    }
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.values[parts[0].0].rows();
        let total: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Tensor::zeros(rows, total);
        let mut offsets = Vec::with_capacity(parts.len());
        let mut c0 = 0;
        for p in parts {
            let v = &self.values[p.0];
            assert_eq!(v.rows(), rows, "concat_cols heights");
            offsets.push((p.0, c0, v.cols()));
            c0 += v.cols();
        }
        for r in 0..rows {
            for &(pid, start, w) in &offsets {
                let src = self.values[pid].row(r).to_vec();
                out.row_mut(r)[start..start + w].copy_from_slice(&src);
            }
        }
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                for &(pid, start, w) in &offsets {
                    for r in 0..g.rows() {
                        let grow = &g.row(r)[start..start + w];
                        let grow = grow.to_vec();
                        for (a, b) in gp[pid].row_mut(r).iter_mut().zip(grow) {
                            *a += b;
                        }
                    }
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = &self.values[x.0];
        assert!(start + len <= v.cols(), "slice_cols range");
        let mut out = Tensor::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let gx = &mut gp[x.0];
                for r in 0..g.rows() {
                    for (c, &gv) in g.row(r).iter().enumerate() {
                        let cur = gx.at(r, start + c);
                        gx.set(r, start + c, cur + gv);
                    }
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    /// Repeats row i of `x` `counts[i]` times (duration upsampling).
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Var {
        let v = &self.values[x.0];
        assert_eq!(v.rows(), counts.len(), "repeat_rows count per row");
        let total: usize = counts.iter().sum();
        let mut out = Tensor::zeros(total, v.cols());
        let mut r = 0;
        for (i, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                out.row_mut(r).copy_from_slice(v.row(i));
                r += 1;
            }
        }
        let counts = counts.to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let gx = &mut gp[x.0];
                let mut r = 0;
                for (i, &n) in counts.iter().enumerate() {
                    for _ in 0..n {
                        let grow = g.row(r).to_vec();
                        for (a, b) in gx.row_mut(i).iter_mut().zip(grow) {
                            *a += b;
                        }
                        r += 1;
                    }
                }
            })),
        )
    }

    /// Repeats a 1×H row n times.
    pub fn broadcast_row(&mut self, x: Var, n: usize) -> Var {
        assert_eq!(self.values[x.0].rows(), 1, "broadcast_row takes a row vector");
        self.repeat_rows(x, &[n])
    }

    /// Column mean over rows → 1×H.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = &self.values[x.0];
        let (rows, cols) = v.shape();
        let n: F = fu(rows);
        let mut out = Tensor::zeros(1, cols);
        for r in 0..rows {
            for (o, &xv) in out.row_mut(0).iter_mut().zip(v.row(r)) {
                *o += xv;
            }
        }
        for o in out.data_mut() {
            *o = *o / n;
        }
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let gx = &mut gp[x.0];
                let inv: F = n.recip();
                for r in 0..gx.rows() {
                    let grow = g.row(0).to_vec();
                    for (a, b) in gx.row_mut(r).iter_mut().zip(grow) {
                        *a += b * inv;
                    }
                }
            })),
        )
    }

    /// Means over consecutive row chunks of size `chunk` (last chunk may be
    /// short) → ⌈rows/chunk⌉ × H.
    pub fn chunk_mean_rows(&mut self, x: Var, chunk: usize) -> Var {
        assert!(chunk >= 1);
        let v = &self.values[x.0];
        let (rows, cols) = v.shape();
        let out_rows = rows.div_ceil(chunk);
        let mut out = Tensor::zeros(out_rows, cols);
        let mut sizes = Vec::with_capacity(out_rows);
        for or in 0..out_rows {
            let lo = or * chunk;
            let hi = (lo + chunk).min(rows);
            sizes.push(hi - lo);
            for r in lo..hi {
                for (o, &xv) in out.row_mut(or).iter_mut().zip(v.row(r)) {
                    *o += xv;
                }
            }
            let inv: F = fu::<F>(hi - lo).recip();
            for o in out.row_mut(or) {
                *o = *o * inv;
            }
        }
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let gx = &mut gp[x.0];
                for (or, &sz) in sizes.iter().enumerate() {
                    let inv: F = fu::<F>(sz).recip();
                    let grow: Vec<F> = g.row(or).to_vec();
                    for r in or * chunk..or * chunk + sz {
                        for (a, &b) in gx.row_mut(r).iter_mut().zip(&grow) {
                            *a += b * inv;
                        }
                    }
                }
            })),
        )
    }

    /// Value passes through; gradient stops here.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.values[x.0].clone();
        self.push(v, None)
    }

    /// Straight-through estimator: the value is `target` exactly, the
    /// gradient passes to `x` unchanged.
    pub fn straight_through(&mut self, x: Var, target: &Tensor<F>) -> Var {
        assert_eq!(self.values[x.0].shape(), target.shape(), "straight_through shapes");
        self.push(
            target.clone(),
            Some(Box::new(move |_, g, gp| {
                gp[x.0].add_assign_scaled(g, F::one());
            })),
        )
    }

    /// Nearest-neighbor 2× upsampling over rows.
    pub fn upsample2_rows(&mut self, x: Var) -> Var {
        let counts = vec![2usize; self.values[x.0].rows()];
        self.repeat_rows(x, &counts)
    }

    /// Keeps the first `len` rows; gradient for dropped rows is zero.
    pub fn crop_rows(&mut self, x: Var, len: usize) -> Var {
        self.slice_rows(x, 0, len)
    }

    /// 1-D convolution over rows (time axis). `x` is T×Cin, `w` is
    /// Cout×(k·Cin) with taps blocked per offset, `b` is 1×Cout.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, k: usize, stride: usize, pad: usize) -> Var {
        let (t_in, c_in) = self.values[x.0].shape();
        let (c_out, wk) = self.values[w.0].shape();
        assert_eq!(wk, k * c_in, "conv1d kernel layout");
        assert_eq!(self.values[b.0].shape(), (1, c_out), "conv1d bias");
        assert!(t_in + 2 * pad >= k, "conv1d input too short");
        let t_out = (t_in + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(t_out, c_out);
        {
            let vx = &self.values[x.0];
            let vw = &self.values[w.0];
            let vb = &self.values[b.0];
            for to in 0..t_out {
                out.row_mut(to).copy_from_slice(vb.row(0));
                for dk in 0..k {
                    let ti = (to * stride + dk) as isize - pad as isize;
                    if ti < 0 || ti >= t_in as isize {
                        continue;
                    }
                    let xrow = vx.row(ti as usize);
                    for co in 0..c_out {
                        let wseg = &vw.row(co)[dk * c_in..(dk + 1) * c_in];
                        out.row_mut(to)[co] += crate::tensor::dot(wseg, xrow);
                    }
                }
            }
        }
        self.push(
            out,
            Some(Box::new(move |vals, g, gp| {
                let vx = vals[x.0].clone();
                let vw = vals[w.0].clone();
                let t_out = g.rows();
                for to in 0..t_out {
                    let grow = g.row(to);
                    {
                        let gb = &mut gp[b.0];
                        for (a, &gv) in gb.row_mut(0).iter_mut().zip(grow) {
                            *a += gv;
                        }
                    }
                    for dk in 0..k {
                        let ti = (to * stride + dk) as isize - pad as isize;
                        if ti < 0 || ti >= vx.rows() as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for (co, &gv) in grow.iter().enumerate() {
                            if gv == F::zero() {
                                continue;
                            }
                            {
                                let gw = &mut gp[w.0];
                                let seg = &mut gw.row_mut(co)[dk * c_in..(dk + 1) * c_in];
                                for (a, &xv) in seg.iter_mut().zip(vx.row(ti)) {
                                    *a += gv * xv;
                                }
                            }
                            {
                                let gx = &mut gp[x.0];
                                let wseg = &vw.row(co)[dk * c_in..(dk + 1) * c_in];
                                for (a, &wv) in gx.row_mut(ti).iter_mut().zip(wseg) {
                                    *a += gv * wv;
                                }
                            }
                        }
                    }
                }
            })),
        )
    }

    /// Builds the pause-augmented sequence: after each row i of `e` whose
    /// class is > 0, inserts row `classes[i]` of the pause embedding table.
    pub fn interleave_pause_rows(&mut self, e: Var, emb: Var, classes: &[usize]) -> Var {
        let v = &self.values[e.0];
        let emb_v = &self.values[emb.0];
        assert_eq!(v.rows(), classes.len(), "one class per row");
        assert_eq!(v.cols(), emb_v.cols(), "embedding width");
        let extra = classes.iter().filter(|&&c| c > 0).count();
        let mut out = Tensor::zeros(v.rows() + extra, v.cols());
        let mut r = 0;
        for (i, &cls) in classes.iter().enumerate() {
            out.row_mut(r).copy_from_slice(v.row(i));
            r += 1;
            if cls > 0 {
                out.row_mut(r).copy_from_slice(emb_v.row(cls));
                r += 1;
            }
        }
        let classes = classes.to_vec();
        self.push(
            out,
            Some(Box::new(move |_, g, gp| {
                let mut r = 0;
                for (i, &cls) in classes.iter().enumerate() {
                    {
                        let ge = &mut gp[e.0];
                        let grow = g.row(r).to_vec();
                        for (a, b) in ge.row_mut(i).iter_mut().zip(grow) {
                            *a += b;
                        }
                    }
                    r += 1;
                    if cls > 0 {
                        let gemb = &mut gp[emb.0];
                        let grow = g.row(r).to_vec();
                        for (a, b) in gemb.row_mut(cls).iter_mut().zip(grow) {
                            *a += b;
                        }
                        r += 1;
                    }
                }
            })),
        )
    }

    /// Scalar combination Σ kᵢ·xᵢ of 1×1 vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, F)]) -> Var {
        assert!(!terms.is_empty());
        let mut s = F::zero();
        for &(v, k) in terms {
            s += self.values[v.0].item() * k;
        }
        let terms = terms.to_vec();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_, g, gp| {
                let gv = g.item();
                for &(v, k) in &terms {
                    gp[v.0].data_mut()[0] += gv * k;
                }
            })),
        )
    }
}

#[inline]
fn sign<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

pub fn softmax_into<F: Scalar>(logits: &[F], out: &mut [F]) {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite difference on a scalar-valued function of one leaf.
    fn fd_check(
        build: impl Fn(&mut Tape<f64>, Var) -> Var,
        x0: Tensor<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let g = grads.get(x).clone();

        let eps = 1e-6;
        for i in 0..x0.len() {
            let mut plus = x0.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x0.clone();
            minus.data_mut()[i] -= eps;
            let f = |t: Tensor<f64>| {
                let mut tape = Tape::new();
                let x = tape.leaf(t);
                let loss = build(&mut tape, x);
                tape.item(loss)
            };
            let fd = (f(plus) - f(minus)) / (2.0 * eps);
            let a = g.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-8);
            assert!(
                ((a - fd) / denom).abs() < tol,
                "grad mismatch at {}: analytic {} vs fd {}",
                i,
                a,
                fd
            );
        }
    }

    fn test_input(rows: usize, cols: usize) -> Tensor<f64> {
        let mut t = Tensor::zeros(rows, cols);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((i as f64) * 0.37 + 0.11).sin() * 0.9;
        }
        t
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        fd_check(
            |t, x| {
                let y = t.tanh(x);
                let z = t.mul(y, x);
                t.mean_all(z)
            },
            test_input(3, 4),
            1e-6,
        );
        fd_check(
            |t, x| {
                let y = t.gelu(x);
                t.sum_all(y)
            },
            test_input(2, 5),
            1e-6,
        );
        fd_check(
            |t, x| {
                let y = t.snake(x);
                t.mean_all(y)
            },
            test_input(2, 3),
            1e-6,
        );
    }

    #[test]
    fn matmul_and_softmax_grads() {
        fd_check(
            |t, x| {
                let w = t.leaf(test_input(4, 3));
                let y = t.matmul(x, w);
                let s = t.row_softmax(y);
                let tgt = Tensor::filled(3, 3, 0.25);
                t.mse_const(s, &tgt)
            },
            test_input(3, 4),
            1e-5,
        );
        fd_check(
            |t, x| {
                let other = t.leaf(test_input(5, 4));
                let y = t.matmul_nt(x, other);
                t.mean_all(y)
            },
            test_input(3, 4),
            1e-6,
        );
    }

    #[test]
    fn layernorm_grad() {
        fd_check(
            |t, x| {
                let gamma = t.leaf(Tensor::filled(1, 4, 1.3));
                let beta = t.leaf(Tensor::filled(1, 4, -0.2));
                let y = t.layernorm_rows(x, gamma, beta, 1e-5);
                let tgt = test_input(3, 4);
                t.mse_const(y, &tgt)
            },
            test_input(3, 4),
            1e-5,
        );
    }

    #[test]
    fn structural_op_grads() {
        fd_check(
            |t, x| {
                let up = t.repeat_rows(x, &[2, 1, 3]);
                let m = t.chunk_mean_rows(up, 2);
                t.mean_all(m)
            },
            test_input(3, 4),
            1e-6,
        );
        fd_check(
            |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_cols(x, 2, 2);
                let c = t.concat_cols(&[b, a]);
                let g = t.gather_rows(c, &[2, 0, 0, 1]);
                t.mean_all(g)
            },
            test_input(3, 4),
            1e-6,
        );
    }

    #[test]
    fn conv1d_grad() {
        fd_check(
            |t, x| {
                let w = t.leaf(test_input(2, 9)); // Cout=2, k=3, Cin=3
                let b = t.leaf(test_input(1, 2));
                let y = t.conv1d(x, w, b, 3, 1, 1);
                t.mean_all(y)
            },
            test_input(5, 3),
            1e-6,
        );
        // strided
        fd_check(
            |t, x| {
                let w = t.leaf(test_input(4, 6)); // Cout=4, k=2, Cin=3
                let b = t.leaf(test_input(1, 4));
                let y = t.conv1d(x, w, b, 2, 2, 1);
                t.mean_all(y)
            },
            test_input(6, 3),
            1e-6,
        );
    }

    #[test]
    fn loss_op_grads() {
        // ce_rows through a softmax
        fd_check(
            |t, x| {
                let p = t.row_softmax(x);
                t.ce_rows(p, &[1, 0, 2], 1e-9)
            },
            test_input(3, 3),
            1e-5,
        );
        // cpo hinge with weights: avoid kinks by construction
        fd_check(
            |t, x| {
                let h = t.cpo_hinge(x, &[0.0, 1.0, -0.5], &[2.0, -1.0, 1.5], 0.75);
                t.mean_all(h)
            },
            test_input(3, 1),
            1e-6,
        );
    }

    #[test]
    fn interleave_grad_and_shape() {
        fd_check(
            |t, x| {
                let emb = t.leaf(test_input(4, 4));
                let aug = t.interleave_pause_rows(x, emb, &[0, 2, 0]);
                t.mean_all(aug)
            },
            test_input(3, 4),
            1e-6,
        );
        let mut tape: Tape<f64> = Tape::new();
        let e = tape.leaf(test_input(3, 4));
        let emb = tape.leaf(test_input(4, 4));
        let aug = tape.interleave_pause_rows(e, emb, &[1, 0, 3]);
        assert_eq!(tape.value(aug).shape(), (5, 4));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(test_input(2, 2));
        let d = tape.detach(x);
        let y = tape.mse_const(d, &Tensor::zeros(2, 2));
        let grads = tape.backward(y);
        assert!(grads.get(x).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn weighted_sum_combines_scalars() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::scalar(2.0));
        let b = tape.leaf(Tensor::scalar(3.0));
        let s = tape.weighted_sum(&[(a, 1.5), (b, 2.0)]);
        assert!((tape.item(s) - 9.0).abs() < 1e-12);
        let grads = tape.backward(s);
        assert_eq!(grads.get(a).item(), 1.5);
        assert_eq!(grads.get(b).item(), 2.0);
    }
}

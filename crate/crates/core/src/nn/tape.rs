//! Reverse-mode tape over a fixed set of fused operations.
//!
//! Parameters are referenced by [`ParamId`] and never copied into the tape;
//! [`Tape::backward`] accumulates their gradients into a [`Grads`] buffer.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{axpy, dot, matmul_acc, Grads, Mat, ParamId, Parameters};
use crate::math::{exp, sqrt};

const LN_EPS: f64 = 1e-5;

/// Handle to a node of a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Input,
    Embed {
        table: ParamId,
        pos: ParamId,
        ids: Vec<usize>,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Add(NodeId, NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: ParamId,
        bias: ParamId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        limits: Vec<usize>,
        probs: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Records a forward computation so it can be differentiated.
pub struct Tape<'p> {
    params: &'p Parameters,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Parameters) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p Parameters {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// A constant (no gradient flows past it).
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Input)
    }

    /// `table[ids[i]] + pos[i]` for each row `i`.
    pub fn embed(&mut self, table: ParamId, pos: ParamId, ids: &[usize]) -> NodeId {
        let t = self.params.tensor(table);
        let p = self.params.tensor(pos);
        assert!(ids.len() <= p.rows, "sequence longer than positional table");
        let d = t.cols;
        let mut out = Mat::zeros(ids.len(), d);
        for (i, &id) in ids.iter().enumerate() {
            let row = out.row_mut(i);
            row.copy_from_slice(&t.data[id * d..(id + 1) * d]);
            axpy(row, 1.0, &p.data[i * d..(i + 1) * d]);
        }
        self.push(
            out,
            Op::Embed {
                table,
                pos,
                ids: ids.to_vec(),
            },
        )
    }

    /// `x · W + b` with `W` stored `in × out` and `b` as `1 × out`.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let wt = self.params.tensor(w);
        let bt = self.params.tensor(b);
        debug_assert_eq!(xv.cols, wt.rows);
        let (n, k, m) = (xv.rows, wt.rows, wt.cols);
        let mut out = Mat::zeros(n, m);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&bt.data);
        }
        matmul_acc(&mut out.data, &xv.data, &wt.data, n, k, m);
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        axpy(&mut out.data, 1.0, &self.nodes[b.0].value.data);
        self.push(out, Op::Add(a, b))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.nodes[x.0].value.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let g = &self.params.tensor(gain).data;
        let b = &self.params.tensor(bias).data;
        let (n, d) = (xv.rows, xv.cols);
        let mut out = Mat::zeros(n, d);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / sqrt(var + LN_EPS);
            rstd[i] = r;
            let xh = &mut xhat[i * d..(i + 1) * d];
            let o = out.row_mut(i);
            for c in 0..d {
                xh[c] = (row[c] - mean) * r;
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention on already projected
    /// `q (n×d)`, `k, v (m×d)`. Query row `i` attends to keys `0..limits[i]`;
    /// masked keys are skipped entirely, so their values cannot leak.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, limits: Vec<usize>) -> NodeId {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (n, m, d) = (qv.rows, kv.rows, qv.cols);
        assert_eq!(limits.len(), n);
        assert!(d % heads == 0);
        let dh = d / heads;
        let scale = 1.0 / sqrt(dh as f64);
        let mut probs = vec![0.0; heads * n * m];
        let mut out = Mat::zeros(n, d);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..n {
                let lim = limits[i].min(m);
                assert!(lim >= 1, "attention row {i} has no visible key");
                let qrow = &qv.row(i)[cols.clone()];
                let p = &mut probs[(h * n + i) * m..(h * n + i) * m + lim];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj = dot(qrow, &kv.row(j)[cols.clone()]) * scale;
                    max = max.max(*pj);
                }
                let mut total = 0.0;
                for pj in p.iter_mut() {
                    *pj = exp(*pj - max);
                    total += *pj;
                }
                let orow = &mut out.data[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, pj) in p.iter_mut().enumerate() {
                    *pj /= total;
                    axpy(orow, *pj, &vv.row(j)[cols.clone()]);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                limits,
                probs,
            },
        )
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let mut out = self.nodes[x.0].value.clone();
        let mask: Vec<f64> = (0..out.data.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        for (o, m) in out.data.iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask })
    }

    /// Back-propagates `grad_out` (shape of `out`) and accumulates parameter
    /// gradients into `grads`.
    pub fn backward(&self, out: NodeId, grad_out: &Mat, grads: &mut Grads) {
        let mut g: Vec<Option<Vec<f64>>> = Vec::with_capacity(out.0 + 1);
        g.resize_with(out.0 + 1, || None);
        assert_eq!(grad_out.data.len(), self.nodes[out.0].value.data.len());
        g[out.0] = Some(grad_out.data.clone());

        fn acc(g: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            g[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=out.0).rev() {
            let Some(dy) = g[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Embed { table, pos, ids } => {
                    let d = node.value.cols;
                    {
                        let dt = grads.get_mut(*table);
                        for (i, &id) in ids.iter().enumerate() {
                            axpy(&mut dt[id * d..(id + 1) * d], 1.0, &dy[i * d..(i + 1) * d]);
                        }
                    }
                    let dp = grads.get_mut(*pos);
                    axpy(&mut dp[..dy.len()], 1.0, &dy);
                }
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[x.0].value;
                    let wt = self.params.tensor(*w);
                    let (n, k, m) = (xv.rows, wt.rows, wt.cols);
                    {
                        let db = grads.get_mut(*b);
                        for i in 0..n {
                            axpy(db, 1.0, &dy[i * m..(i + 1) * m]);
                        }
                    }
                    {
                        let dw = grads.get_mut(*w);
                        for i in 0..n {
                            let dyr = &dy[i * m..(i + 1) * m];
                            for kk in 0..k {
                                let xv_ik = xv.data[i * k + kk];
                                if xv_ik != 0.0 {
                                    axpy(&mut dw[kk * m..(kk + 1) * m], xv_ik, dyr);
                                }
                            }
                        }
                    }
                    if !matches!(self.nodes[x.0].op, Op::Input) {
                        let dx = acc(&mut g, *x, n * k);
                        for i in 0..n {
                            let dyr = &dy[i * m..(i + 1) * m];
                            for kk in 0..k {
                                dx[i * k + kk] += dot(dyr, &wt.data[kk * m..(kk + 1) * m]);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let len = dy.len();
                    axpy(acc(&mut g, *a, len), 1.0, &dy);
                    axpy(acc(&mut g, *b, len), 1.0, &dy);
                }
                Op::Relu(x) => {
                    let dx = acc(&mut g, *x, dy.len());
                    for ((d, &y), &o) in dx.iter_mut().zip(&dy).zip(&node.value.data) {
                        if o > 0.0 {
                            *d += y;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (n, d) = (node.value.rows, node.value.cols);
                    let gv = &self.params.tensor(*gain).data;
                    {
                        let dg = grads.get_mut(*gain);
                        for i in 0..n {
                            for c in 0..d {
                                dg[c] += dy[i * d + c] * xhat[i * d + c];
                            }
                        }
                    }
                    {
                        let db = grads.get_mut(*bias);
                        for i in 0..n {
                            axpy(db, 1.0, &dy[i * d..(i + 1) * d]);
                        }
                    }
                    let dx = acc(&mut g, *x, n * d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let xh = &xhat[i * d..(i + 1) * d];
                        for c in 0..d {
                            dxhat[c] = dy[i * d + c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dot(&dxhat, xh) / d as f64;
                        for c in 0..d {
                            dx[i * d + c] += rstd[i] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    limits,
                    probs,
                } => {
                    let qv = &self.nodes[q.0].value;
                    let kv = &self.nodes[k.0].value;
                    let vv = &self.nodes[v.0].value;
                    let (n, m, d) = (qv.rows, kv.rows, qv.cols);
                    let dh = d / heads;
                    let scale = 1.0 / sqrt(dh as f64);
                    let mut dq = vec![0.0; n * d];
                    let mut dk = vec![0.0; m * d];
                    let mut dv = vec![0.0; m * d];
                    let mut ds = vec![0.0; m];
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..n {
                            let lim = limits[i].min(m);
                            let p = &probs[(h * n + i) * m..(h * n + i) * m + lim];
                            let dout = &dy[i * d + h * dh..i * d + (h + 1) * dh];
                            let mut weighted = 0.0;
                            for j in 0..lim {
                                let dp = dot(dout, &vv.row(j)[cols.clone()]);
                                ds[j] = dp;
                                weighted += p[j] * dp;
                                axpy(&mut dv[j * d + h * dh..j * d + (h + 1) * dh], p[j], dout);
                            }
                            let qrow = &qv.row(i)[cols.clone()];
                            for j in 0..lim {
                                let s = p[j] * (ds[j] - weighted) * scale;
                                if s == 0.0 {
                                    continue;
                                }
                                axpy(
                                    &mut dq[i * d + h * dh..i * d + (h + 1) * dh],
                                    s,
                                    &kv.row(j)[cols.clone()],
                                );
                                axpy(&mut dk[j * d + h * dh..j * d + (h + 1) * dh], s, qrow);
                            }
                        }
                    }
                    axpy(acc(&mut g, *q, n * d), 1.0, &dq);
                    axpy(acc(&mut g, *k, m * d), 1.0, &dk);
                    axpy(acc(&mut g, *v, m * d), 1.0, &dv);
                }
                Op::Dropout { x, mask } => {
                    let dx = acc(&mut g, *x, dy.len());
                    for ((d, &y), &mk) in dx.iter_mut().zip(&dy).zip(mask) {
                        *d += y * mk;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective: weighted sum of the output with fixed weights.
    fn objective(params: &Parameters, build: &dyn Fn(&mut Tape) -> NodeId, weights: &[f64]) -> f64 {
        let mut tape = Tape::new(params);
        let out = build(&mut tape);
        dot(&tape.value(out).data, weights)
    }

    fn check_grads(params: &mut Parameters, build: &dyn Fn(&mut Tape) -> NodeId) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (rows, cols) = {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            (tape.value(out).rows, tape.value(out).cols)
        };
        let weights: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut grads = Grads::zeros_like(params);
        {
            let mut tape = Tape::new(params);
            let out = build(&mut tape);
            tape.backward(out, &Mat::from_vec(rows, cols, weights.clone()), &mut grads);
        }
        let eps = 1e-6;
        for pid in 0..params.len() {
            for e in 0..params.tensors()[pid].data.len() {
                let orig = params.tensors()[pid].data[e];
                params.tensor_mut(ParamId(pid)).data[e] = orig + eps;
                let fp = objective(params, build, &weights);
                params.tensor_mut(ParamId(pid)).data[e] = orig - eps;
                let fm = objective(params, build, &weights);
                params.tensor_mut(ParamId(pid)).data[e] = orig;
                let fd = (fp - fm) / (2.0 * eps);
                let an = grads.data[pid][e];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{}[{e}]: fd {fd} vs analytic {an}",
                    params.tensors()[pid].name
                );
            }
        }
    }

    #[test]
    fn fused_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = Parameters::new();
        let d = 4;
        p.add_embedding("tok", 6, d, &mut rng);
        p.add_embedding("pos", 5, d, &mut rng);
        for name in ["q", "k", "v", "o", "f"] {
            p.add_glorot(&alloc::format!("{name}.w"), d, d, &mut rng);
            p.add_embedding(&alloc::format!("{name}.b"), 1, d, &mut rng);
        }
        p.add("ln.g", 1, d, (0..d).map(|i| 1.0 + 0.1 * i as f64).collect());
        p.add_embedding("ln.b", 1, d, &mut rng);
        let ids = [1usize, 4, 2, 2];
        let ctx = Mat::from_vec(3, d, (0..3 * d).map(|i| (i as f64 * 0.37).sin()).collect());
        let build = move |t: &mut Tape| {
            let pr = t.params();
            let g = |n: &str| pr.get(n).unwrap();
            let x = t.embed(g("tok"), g("pos"), &ids);
            let n = t.layer_norm(x, g("ln.g"), g("ln.b"));
            let q = t.linear(n, g("q.w"), g("q.b"));
            let k = t.linear(n, g("k.w"), g("k.b"));
            let v = t.linear(n, g("v.w"), g("v.b"));
            let a = t.attention(q, k, v, 2, alloc::vec![1, 2, 3, 4]);
            let o = t.linear(a, g("o.w"), g("o.b"));
            let c = t.input(ctx.clone());
            let kc = t.linear(c, g("k.w"), g("k.b"));
            let ca = t.attention(o, kc, kc, 2, alloc::vec![3, 1, 2, 3]);
            let r = t.add(ca, x);
            let f = t.linear(r, g("f.w"), g("f.b"));
            t.relu(f)
        };
        check_grads(&mut p, &build);
    }
}

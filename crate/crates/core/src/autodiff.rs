//! Minimal reverse-mode differentiation over small dense vectors.
//!
//! Parameters live in a [`ParamSet`]; a [`Graph`] borrows them, records the
//! forward computation and returns dense gradients shaped like the set.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    /// Flat view index → (tensor, offset).
    pub fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.data.len() {
                return (i, flat);
            }
            flat -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn scalar(&self, flat: usize) -> f64 {
        let (t, o) = self.locate(flat);
        self.tensors[t].data[o]
    }

    pub fn set_scalar(&mut self, flat: usize, v: f64) {
        let (t, o) = self.locate(flat);
        self.tensors[t].data[o] = v;
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Dense gradient buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn flat(&self, flat: usize) -> f64 {
        let mut i = flat;
        for g in &self.0 {
            if i < g.len() {
                return g[i];
            }
            i -= g.len();
        }
        panic!("flat gradient index out of range");
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Gather { p: ParamId, row: usize },
    Linear { w: ParamId, x: Var },
    Bias { x: Var, b: ParamId },
    Concat(Vec<Var>),
    Add(Var, Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    WeightedSum(Vec<(Var, f64)>),
    /// `Σ_j w_j v_j` with `w_j = α_j / (1 + Σ α)` and `α_j = exp(scale · k_j·q)`.
    Attend {
        q: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        scale: f64,
        weights: Vec<f64>,
    },
    /// Log-sum-exp over scalar inputs; stores the softmax.
    LogSumExp { xs: Vec<Var>, probs: Vec<f64> },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn gather(&mut self, p: ParamId, row: usize) -> Var {
        let value = self.params.get(p).row(row).to_vec();
        self.push(value, Op::Gather { p, row })
    }

    pub fn linear(&mut self, w: ParamId, x: Var) -> Var {
        let wt = self.params.get(w);
        let xv = &self.nodes[x.0].value;
        assert_eq!(wt.cols, xv.len(), "linear: {} cols vs input {}", wt.cols, xv.len());
        let value = (0..wt.rows)
            .map(|r| wt.row(r).iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        self.push(value, Op::Linear { w, x })
    }

    pub fn bias(&mut self, x: Var, b: ParamId) -> Var {
        let bt = self.params.get(b);
        let value: Vec<f64> = self.nodes[x.0]
            .value
            .iter()
            .zip(&bt.data)
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(value.len(), bt.data.len(), "bias length");
        self.push(value, Op::Bias { x, b })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(value, Op::Add(a, b))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(value, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|&v| softplus(v)).collect();
        self.push(value, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.push(value, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.iter().map(|v| v.ln()).collect();
        self.push(value, Op::Log(x))
    }

    /// `Σ w_i x_i` over equally sized inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let n = terms.first().map(|(v, _)| self.len(*v)).unwrap_or(1);
        let mut value = vec![0.0; n];
        for (v, w) in terms {
            for (acc, x) in value.iter_mut().zip(&self.nodes[v.0].value) {
                *acc += w * x;
            }
        }
        self.push(value, Op::WeightedSum(terms.to_vec()))
    }

    /// `dim` is the value width; with no keys the result is the zero vector.
    pub fn attend(&mut self, q: Var, keys: &[Var], values: &[Var], scale: f64, dim: usize) -> Var {
        assert_eq!(keys.len(), values.len());
        let qv = &self.nodes[q.0].value;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| {
                let kv = &self.nodes[k.0].value;
                assert_eq!(kv.len(), qv.len(), "attend: key/query length");
                scale * kv.iter().zip(qv).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        // w_j = e^{s_j - m} / (e^{-m} + Σ e^{s_i - m}) with m = max(0, max s)
        let m = scores.iter().copied().fold(0.0_f64, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let denom = (-m).exp() + exps.iter().sum::<f64>();
        let weights: Vec<f64> = exps.iter().map(|e| e / denom).collect();
        let mut value = vec![0.0; dim];
        for (v, w) in values.iter().zip(&weights) {
            for (acc, x) in value.iter_mut().zip(&self.nodes[v.0].value) {
                *acc += w * x;
            }
        }
        self.push(
            value,
            Op::Attend {
                q,
                keys: keys.to_vec(),
                values: values.to_vec(),
                scale,
                weights,
            },
        )
    }

    /// Numerically stable `log Σ exp x_i` over scalar inputs.
    pub fn logsumexp(&mut self, xs: &[Var]) -> Var {
        let vals: Vec<f64> = xs.iter().map(|v| self.scalar(*v)).collect();
        let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = vals.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        let probs = exps.iter().map(|e| e / s).collect();
        self.push(
            vec![m + s.ln()],
            Op::LogSumExp {
                xs: xs.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates `seed` from `out` and returns parameter gradients.
    pub fn backward_with(&self, out: Var, seed: &[f64]) -> Grads {
        let mut grads = self.params.zero_grads();
        let mut adj: Vec<Vec<f64>> = Vec::with_capacity(out.0 + 1);
        adj.extend(self.nodes[..=out.0].iter().map(|_| Vec::new()));
        adj[out.0] = seed.to_vec();

        fn acc(adj: &mut [Vec<f64>], v: Var, delta: impl Iterator<Item = f64>, n: usize) {
            let slot = &mut adj[v.0];
            if slot.is_empty() {
                *slot = vec![0.0; n];
            }
            for (a, d) in slot.iter_mut().zip(delta) {
                *a += d;
            }
        }

        for idx in (0..=out.0).rev() {
            if adj[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Gather { p, row } => {
                    let cols = self.params.get(*p).cols;
                    let dst = &mut grads.0[p.0][row * cols..(row + 1) * cols];
                    for (d, x) in dst.iter_mut().zip(&g) {
                        *d += x;
                    }
                }
                Op::Linear { w, x } => {
                    let wt = self.params.get(*w);
                    let xv = &self.nodes[x.0].value;
                    let gw = &mut grads.0[w.0];
                    for r in 0..wt.rows {
                        if g[r] == 0.0 {
                            continue;
                        }
                        for c in 0..wt.cols {
                            gw[r * wt.cols + c] += g[r] * xv[c];
                        }
                    }
                    let n = wt.cols;
                    let dx = (0..n).map(|c| (0..wt.rows).map(|r| wt.data[r * n + c] * g[r]).sum());
                    acc(&mut adj, *x, dx, n);
                }
                Op::Bias { x, b } => {
                    for (d, v) in grads.0[b.0].iter_mut().zip(&g) {
                        *d += v;
                    }
                    acc(&mut adj, *x, g.iter().copied(), g.len());
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        acc(&mut adj, *p, g[off..off + n].iter().copied(), n);
                        off += n;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *a, g.iter().copied(), g.len());
                    acc(&mut adj, *b, g.iter().copied(), g.len());
                }
                Op::Tanh(x) => {
                    let d = node.value.iter().zip(&g).map(|(y, gi)| gi * (1.0 - y * y));
                    acc(&mut adj, *x, d, g.len());
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[x.0].value;
                    let d = xv.iter().zip(&g).map(|(xi, gi)| gi * sigmoid(*xi));
                    acc(&mut adj, *x, d, g.len());
                }
                Op::Exp(x) => {
                    let d = node.value.iter().zip(&g).map(|(y, gi)| gi * y);
                    acc(&mut adj, *x, d, g.len());
                }
                Op::Log(x) => {
                    let xv = &self.nodes[x.0].value;
                    let d = xv.iter().zip(&g).map(|(xi, gi)| gi / xi);
                    acc(&mut adj, *x, d, g.len());
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        acc(&mut adj, *v, g.iter().map(|gi| gi * w), g.len());
                    }
                }
                Op::Attend {
                    q,
                    keys,
                    values,
                    scale,
                    weights,
                } => {
                    let qv = &self.nodes[q.0].value;
                    let out_dot: f64 = g.iter().zip(&node.value).map(|(a, b)| a * b).sum();
                    let mut dq = vec![0.0; qv.len()];
                    for ((k, v), w) in keys.iter().zip(values).zip(weights) {
                        let vv = &self.nodes[v.0].value;
                        acc(&mut adj, *v, g.iter().map(|gi| gi * w), g.len());
                        let gv: f64 = g.iter().zip(vv).map(|(a, b)| a * b).sum();
                        let gs = w * (gv - out_dot) * scale;
                        let kv = &self.nodes[k.0].value;
                        for (d, kk) in dq.iter_mut().zip(kv) {
                            *d += gs * kk;
                        }
                        acc(&mut adj, *k, qv.iter().map(|qq| gs * qq), qv.len());
                    }
                    acc(&mut adj, *q, dq.into_iter(), qv.len());
                }
                Op::LogSumExp { xs, probs } => {
                    for (x, p) in xs.iter().zip(probs) {
                        acc(&mut adj, *x, std::iter::once(g[0] * p), 1);
                    }
                }
            }
        }
        grads
    }

    pub fn backward(&self, out: Var) -> Grads {
        assert_eq!(self.len(out), 1, "backward expects a scalar output");
        self.backward_with(out, &[1.0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(params: &mut ParamSet, f: impl Fn(&ParamSet) -> (f64, Grads)) {
        let (_, g) = f(params);
        for i in 0..params.num_scalars() {
            let x0 = params.scalar(i);
            let h = 1e-6;
            params.set_scalar(i, x0 + h);
            let (fp, _) = f(params);
            params.set_scalar(i, x0 - h);
            let (fm, _) = f(params);
            params.set_scalar(i, x0);
            let fd = (fp - fm) / (2.0 * h);
            let an = g.flat(i);
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParamSet::default();
        let emb = ps.add("emb", Tensor::uniform(3, 4, 0.5, &mut rng));
        let w = ps.add("w", Tensor::uniform(4, 5, 0.5, &mut rng));
        let b = ps.add("b", Tensor::uniform(4, 1, 0.5, &mut rng));
        let head = ps.add("head", Tensor::uniform(1, 4, 0.5, &mut rng));
        fd_check(&mut ps, |ps| {
            let mut g = Graph::new(ps);
            let c = g.input(vec![1.0]);
            let e0 = g.gather(emb, 0);
            let e2 = g.gather(emb, 2);
            let x0 = g.concat(&[c, e0]);
            let x2 = g.concat(&[c, e2]);
            let k0 = g.linear(w, x0);
            let k2 = g.linear(w, x2);
            let q = g.bias(k2, b);
            let a = g.attend(q, &[k0, k2], &[e0, e2], 0.5, 4);
            let t = g.tanh(a);
            let r = g.add(t, e2);
            let h = g.linear(head, r);
            let s = g.softplus(h);
            let l = g.ln(s);
            let ex = g.exp(h);
            let z = g.logsumexp(&[l, ex, h]);
            let out = g.weighted_sum(&[(z, 2.0), (l, -0.5)]);
            (g.scalar(out), g.backward(out))
        });
    }

    #[test]
    fn attend_empty_is_zero() {
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let q = g.input(vec![1.0, 2.0]);
        let a = g.attend(q, &[], &[], 1.0, 3);
        assert_eq!(g.value(a), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn logsumexp_is_stable() {
        let ps = ParamSet::default();
        let mut g = Graph::new(&ps);
        let a = g.input(vec![1000.0]);
        let b = g.input(vec![1000.0]);
        let z = g.logsumexp(&[a, b]);
        assert!((g.scalar(z) - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}

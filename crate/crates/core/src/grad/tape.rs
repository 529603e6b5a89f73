use super::kernels::{self, matmul_nt_acc, matmul_tn_acc};
use super::{GradError, ParamId, ParamStore, Result, Tensor};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    LogSumExp(usize),
    Huber(usize, f64),
    Clamp(usize, f64, f64),
    RepeatRows(usize, usize),
    Reparam { mean: usize, log_std: usize, noise: usize },
    GaussLogProb { x: usize, mean: usize, log_std: usize },
    PairwiseGaussLogProb { x: usize, mean: usize, log_std: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Records operations in evaluation order. Indices are topologically sorted
/// by construction.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::Shape {
        op,
        shapes: format!("{:?} and {:?}", a.shape(), b.shape()),
    }
}

fn dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| GradError::Shape {
        op,
        shapes: format!("{:?} (rank 2 required)", t.shape()),
    })
}

/// Whether `b` broadcasts against `a`: equal, a row `[1, c]`, a column
/// `[r, 1]`, or a scalar `[1, 1]`.
fn broadcastable(a: (usize, usize), b: (usize, usize)) -> bool {
    (b.0 == a.0 || b.0 == 1) && (b.1 == a.1 || b.1 == 1)
}

fn bcast_index(i: usize, j: usize, b: (usize, usize)) -> usize {
    let bi = if b.0 == 1 { 0 } else { i };
    let bj = if b.1 == 1 { 0 } else { j };
    bi * b.1 + bj
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(GradError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient (data, targets, noise).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free input that receives a gradient but is not a stored parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (_, k) = dims("matmul", av)?;
        let (k2, _) = dims("matmul", bv)?;
        if k != k2 {
            return Err(shape_err("matmul", av, bv));
        }
        let out = kernels::matmul(av, bv);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a.0, b.0), ng, "matmul")
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        let ad = dims(name, av)?;
        let bd = dims(name, bv)?;
        if !broadcastable(ad, bd) {
            return Err(shape_err(name, av, bv));
        }
        let mut out = Vec::with_capacity(ad.0 * ad.1);
        for i in 0..ad.0 {
            for j in 0..ad.1 {
                out.push(f(av.data()[i * ad.1 + j], bv.data()[bcast_index(i, j, bd)]));
            }
        }
        Tensor::matrix(ad.0, ad.1, out)
    }

    /// `a + b`, with `b` broadcast over rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a.0, b.0), ng, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a.0, b.0), ng, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a.0, b.0), ng, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a.0, s), ng, "scale")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        dims(name, self.value(a))?;
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, op, ng, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a.0), "relu", |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh(a.0), "tanh", f64::tanh)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Softplus(a.0), "softplus", kernels::softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a.0), "exp", f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a.0), "log", f64::ln)
    }

    pub fn huber(&mut self, a: Var, delta: f64) -> Result<Var> {
        self.unary(a, Op::Huber(a.0, delta), "huber", |v| kernels::huber(v, delta))
    }

    /// Elementwise clamp; the gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, Op::Clamp(a.0, lo, hi), "clamp", |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(GradError::Shape {
                op: "mean",
                shapes: format!("{:?} (empty)", v.shape()),
            });
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(m), Op::Mean(a.0), ng, "mean")
    }

    /// Row-wise log-sum-exp, `[r, c] -> [r, 1]`.
    pub fn log_sum_exp(&mut self, a: Var) -> Result<Var> {
        dims("log_sum_exp", self.value(a))?;
        let out = kernels::log_sum_exp_rows(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::LogSumExp(a.0), ng, "log_sum_exp")
    }

    /// Stacks `n` copies of `a` vertically.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, c) = dims("repeat_rows", self.value(a))?;
        let mut out = Vec::with_capacity(n * r * c);
        for _ in 0..n {
            out.extend_from_slice(self.value(a).data());
        }
        let ng = self.ng(a);
        self.push(Tensor::matrix(n * r, c, out)?, Op::RepeatRows(a.0, n), ng, "repeat_rows")
    }

    /// `mean + exp(log_std) * noise`, with `noise` held constant.
    pub fn gaussian_reparam_sample(&mut self, mean: Var, log_std: Var, noise: Tensor) -> Result<Var> {
        let (mv, sv) = (self.value(mean), self.value(log_std));
        if mv.shape() != sv.shape() || mv.shape() != noise.shape() {
            return Err(GradError::Shape {
                op: "gaussian_reparam_sample",
                shapes: format!("{:?}, {:?}, {:?}", mv.shape(), sv.shape(), noise.shape()),
            });
        }
        dims("gaussian_reparam_sample", mv)?;
        let data = mv
            .data()
            .iter()
            .zip(sv.data())
            .zip(noise.data())
            .map(|((m, s), e)| m + s.exp() * e)
            .collect();
        let out = Tensor::new(mv.shape().to_vec(), data)?;
        let ng = self.ng(mean) || self.ng(log_std);
        let noise = self.constant(noise);
        self.push(
            out,
            Op::Reparam {
                mean: mean.0,
                log_std: log_std.0,
                noise: noise.0,
            },
            ng,
            "gaussian_reparam_sample",
        )
    }

    /// Row-wise diagonal Gaussian log-density, `[r, c] -> [r, 1]`. `mean` and
    /// `log_std` are `[r, c]` or a broadcast row `[1, c]`.
    pub fn diag_gaussian_log_prob(&mut self, x: Var, mean: Var, log_std: Var) -> Result<Var> {
        let (xv, mv, sv) = (self.value(x), self.value(mean), self.value(log_std));
        let xd = dims("diag_gaussian_log_prob", xv)?;
        let md = dims("diag_gaussian_log_prob", mv)?;
        if md != dims("diag_gaussian_log_prob", sv)? || md.1 != xd.1 || !(md.0 == xd.0 || md.0 == 1) {
            return Err(GradError::Shape {
                op: "diag_gaussian_log_prob",
                shapes: format!("{:?}, {:?}, {:?}", xv.shape(), mv.shape(), sv.shape()),
            });
        }
        let mut out = Vec::with_capacity(xd.0);
        for i in 0..xd.0 {
            let mut acc = 0.0;
            for j in 0..xd.1 {
                let k = bcast_index(i, j, md);
                let ls = sv.data()[k];
                let u = (xv.data()[i * xd.1 + j] - mv.data()[k]) / ls.exp();
                acc += -0.5 * u * u - ls - 0.5 * LN_2PI;
            }
            out.push(acc);
        }
        let ng = self.ng(x) || self.ng(mean) || self.ng(log_std);
        self.push(
            Tensor::column(out),
            Op::GaussLogProb {
                x: x.0,
                mean: mean.0,
                log_std: log_std.0,
            },
            ng,
            "diag_gaussian_log_prob",
        )
    }

    /// Log-density of every row of `x [n, d]` under every component of
    /// `means, log_stds [k, d]`, giving `[n, k]`.
    pub fn pairwise_gaussian_log_prob(&mut self, x: Var, means: Var, log_stds: Var) -> Result<Var> {
        let (xv, mv, sv) = (self.value(x), self.value(means), self.value(log_stds));
        let (n, d) = dims("pairwise_gaussian_log_prob", xv)?;
        let (k, d2) = dims("pairwise_gaussian_log_prob", mv)?;
        if d != d2 || sv.shape() != mv.shape() {
            return Err(GradError::Shape {
                op: "pairwise_gaussian_log_prob",
                shapes: format!("{:?}, {:?}, {:?}", xv.shape(), mv.shape(), sv.shape()),
            });
        }
        let mut out = vec![0.0; n * k];
        for i in 0..n {
            let xr = &xv.data()[i * d..(i + 1) * d];
            for c in 0..k {
                let mr = &mv.data()[c * d..(c + 1) * d];
                let sr = &sv.data()[c * d..(c + 1) * d];
                let mut acc = 0.0;
                for j in 0..d {
                    let u = (xr[j] - mr[j]) / sr[j].exp();
                    acc += -0.5 * u * u - sr[j] - 0.5 * LN_2PI;
                }
                out[i * k + c] = acc;
            }
        }
        let ng = self.ng(x) || self.ng(means) || self.ng(log_stds);
        self.push(
            Tensor::matrix(n, k, out)?,
            Op::PairwiseGaussLogProb {
                x: x.0,
                mean: means.0,
                log_std: log_stds.0,
            },
            ng,
            "pairwise_gaussian_log_prob",
        )
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every node
    /// that depends on an input or parameter.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(GradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse sweep and stores parameter gradients in `store`.
    /// Parameters that do not influence the loss receive zeros.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        let mut out: Vec<Tensor> = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect();
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                for (a, v) in out[id.0].data_mut().iter_mut().zip(g.data()) {
                    *a += v;
                }
            }
        }
        store.set_grads(out);
        Ok(())
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |i: usize| &self.nodes[i].value;
        let y = &node.value;
        let elementwise = |i: usize, f: &dyn Fn(usize) -> f64| -> Tensor {
            let x = val(i);
            let data = (0..x.len()).map(|k| g.data()[k] * f(k)).collect();
            Tensor::new(x.shape().to_vec(), data).unwrap()
        };
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(a) {
                    let mut out = vec![0.0; val(a).len()];
                    matmul_nt_acc(g, val(b), &mut out);
                    add_into(&mut grads[a], Tensor::new(val(a).shape().to_vec(), out).unwrap());
                }
                if self.wants(b) {
                    let mut out = vec![0.0; val(b).len()];
                    matmul_tn_acc(val(a), g, &mut out);
                    add_into(&mut grads[b], Tensor::new(val(b).shape().to_vec(), out).unwrap());
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (r, c) = g.dims2().unwrap();
                let bd = val(b).dims2().unwrap();
                let bdata = val(b).data();
                let adata = val(a).data();
                if self.wants(a) {
                    let ga = match node.op {
                        Op::Mul(..) => {
                            let mut out = vec![0.0; r * c];
                            for i in 0..r {
                                for j in 0..c {
                                    out[i * c + j] = g.data()[i * c + j] * bdata[bcast_index(i, j, bd)];
                                }
                            }
                            Tensor::matrix(r, c, out).unwrap()
                        }
                        _ => g.clone(),
                    };
                    add_into(&mut grads[a], ga);
                }
                if self.wants(b) {
                    let mut out = vec![0.0; bd.0 * bd.1];
                    for i in 0..r {
                        for j in 0..c {
                            let gv = g.data()[i * c + j];
                            let contrib = match node.op {
                                Op::Add(..) => gv,
                                Op::Sub(..) => -gv,
                                _ => gv * adata[i * c + j],
                            };
                            out[bcast_index(i, j, bd)] += contrib;
                        }
                    }
                    add_into(&mut grads[b], Tensor::matrix(bd.0, bd.1, out).unwrap());
                }
            }
            Op::Scale(a, s) => {
                if self.wants(a) {
                    add_into(&mut grads[a], g.map(|v| v * s));
                }
            }
            Op::Relu(a) => {
                let x = val(a).data();
                add_into(&mut grads[a], elementwise(a, &|k| if x[k] > 0.0 { 1.0 } else { 0.0 }));
            }
            Op::Tanh(a) => {
                let yd = y.data();
                add_into(&mut grads[a], elementwise(a, &|k| 1.0 - yd[k] * yd[k]));
            }
            Op::Softplus(a) => {
                let x = val(a).data();
                add_into(&mut grads[a], elementwise(a, &|k| kernels::sigmoid(x[k])));
            }
            Op::Exp(a) => {
                let yd = y.data();
                add_into(&mut grads[a], elementwise(a, &|k| yd[k]));
            }
            Op::Log(a) => {
                let x = val(a).data();
                add_into(&mut grads[a], elementwise(a, &|k| 1.0 / x[k]));
            }
            Op::Huber(a, delta) => {
                let x = val(a).data();
                add_into(&mut grads[a], elementwise(a, &|k| x[k].clamp(-delta, delta)));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(a).data();
                add_into(
                    &mut grads[a],
                    elementwise(a, &|k| if x[k] >= lo && x[k] <= hi { 1.0 } else { 0.0 }),
                );
            }
            Op::Sum(a) => {
                let gv = g.item();
                add_into(&mut grads[a], Tensor::full(val(a).shape(), gv));
            }
            Op::Mean(a) => {
                let gv = g.item() / val(a).len() as f64;
                add_into(&mut grads[a], Tensor::full(val(a).shape(), gv));
            }
            Op::LogSumExp(a) => {
                let x = val(a);
                let (r, c) = x.dims2().unwrap();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let lse = y.data()[i];
                    for j in 0..c {
                        out[i * c + j] = g.data()[i] * (x.data()[i * c + j] - lse).exp();
                    }
                }
                add_into(&mut grads[a], Tensor::matrix(r, c, out).unwrap());
            }
            Op::RepeatRows(a, n) => {
                let block = val(a).len();
                let mut out = vec![0.0; block];
                for rep in 0..n {
                    for (o, v) in out.iter_mut().zip(&g.data()[rep * block..(rep + 1) * block]) {
                        *o += v;
                    }
                }
                add_into(&mut grads[a], Tensor::new(val(a).shape().to_vec(), out).unwrap());
            }
            Op::Reparam { mean, log_std, noise } => {
                if self.wants(mean) {
                    add_into(&mut grads[mean], g.clone());
                }
                if self.wants(log_std) {
                    let s = val(log_std).data();
                    let e = val(noise).data();
                    add_into(&mut grads[log_std], elementwise(log_std, &|k| s[k].exp() * e[k]));
                }
            }
            Op::GaussLogProb { x, mean, log_std } => {
                let (xv, mv, sv) = (val(x), val(mean), val(log_std));
                let (r, c) = xv.dims2().unwrap();
                let md = mv.dims2().unwrap();
                let mut gx = vec![0.0; r * c];
                let mut gm = vec![0.0; md.0 * md.1];
                let mut gs = vec![0.0; md.0 * md.1];
                for i in 0..r {
                    let gi = g.data()[i];
                    for j in 0..c {
                        let k = bcast_index(i, j, md);
                        let sigma = sv.data()[k].exp();
                        let u = (xv.data()[i * c + j] - mv.data()[k]) / sigma;
                        gx[i * c + j] = -gi * u / sigma;
                        gm[k] += gi * u / sigma;
                        gs[k] += gi * (u * u - 1.0);
                    }
                }
                if self.wants(x) {
                    add_into(&mut grads[x], Tensor::matrix(r, c, gx).unwrap());
                }
                if self.wants(mean) {
                    add_into(&mut grads[mean], Tensor::matrix(md.0, md.1, gm).unwrap());
                }
                if self.wants(log_std) {
                    add_into(&mut grads[log_std], Tensor::matrix(md.0, md.1, gs).unwrap());
                }
            }
            Op::PairwiseGaussLogProb { x, mean, log_std } => {
                let (xv, mv, sv) = (val(x), val(mean), val(log_std));
                let (n, d) = xv.dims2().unwrap();
                let k = mv.rows();
                let inv_sigma: Vec<f64> = sv.data().iter().map(|s| (-s).exp()).collect();
                let mut gx = vec![0.0; n * d];
                let mut gm = vec![0.0; k * d];
                let mut gs = vec![0.0; k * d];
                for i in 0..n {
                    for c in 0..k {
                        let gic = g.data()[i * k + c];
                        if gic == 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let is = inv_sigma[c * d + j];
                            let u = (xv.data()[i * d + j] - mv.data()[c * d + j]) * is;
                            gx[i * d + j] -= gic * u * is;
                            gm[c * d + j] += gic * u * is;
                            gs[c * d + j] += gic * (u * u - 1.0);
                        }
                    }
                }
                if self.wants(x) {
                    add_into(&mut grads[x], Tensor::matrix(n, d, gx).unwrap());
                }
                if self.wants(mean) {
                    add_into(&mut grads[mean], Tensor::matrix(k, d, gm).unwrap());
                }
                if self.wants(log_std) {
                    add_into(&mut grads[log_std], Tensor::matrix(k, d, gs).unwrap());
                }
            }
        }
    }
}

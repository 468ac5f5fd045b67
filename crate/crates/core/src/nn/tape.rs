use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Marks an output element of [`Tape::select`] that has no source (value 0).
pub const NO_SOURCE: u32 = u32::MAX;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        in_dims: [usize; 3],
        out_dims: [usize; 3],
        // None for pointwise convolutions, where the unfolded input is the input itself.
        cols: Option<Vec<T>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        batch: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Reshape(Var),
    Select {
        input: Var,
        src: Vec<u32>,
    },
    SoftmaxCe {
        logits: Var,
        classes: usize,
        targets: Vec<u32>,
        weights: Vec<T>,
    },
    Huber {
        pred: Var,
        target: Vec<T>,
        weights: Vec<T>,
        delta: T,
    },
    Bce {
        logits: Var,
        target: Vec<T>,
        weights: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass.
///
/// A tape is single-threaded; build one per sample.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn spatial(shape: &[usize]) -> Option<[usize; 3]> {
    match shape.len() {
        3 => Some([shape[1], shape[2], 1]),
        4 => Some([shape[1], shape[2], shape[3]]),
        _ => None,
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Cross-correlation over a `[C, X, Y, Z]` (or `[C, H, W]`) input.
    ///
    /// `weight` is `[C_out, C_in, kx, ky, kz]` (or `[C_out, C_in, kh, kw]`).
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let in_shape = self.shape(input).to_vec();
        let w_shape = self.shape(weight).to_vec();
        let in_dims = spatial(&in_shape).ok_or_else(|| Error::shape(format!("conv input rank {}", in_shape.len())))?;
        let rank = in_shape.len() - 1;
        let ci = in_shape[0];
        if w_shape.len() != rank + 2 || w_shape[1] != ci || w_shape[2..] != geom.kernel[..rank] {
            return Err(Error::shape(format!(
                "conv weight {w_shape:?} incompatible with input {in_shape:?} and kernel {:?}",
                geom.kernel
            )));
        }
        if rank == 2 && (geom.kernel[2] != 1 || geom.stride[2] != 1 || geom.pad[2] != 0) {
            return Err(Error::shape("2D convolution with non-unit third axis".to_string()));
        }
        let co = w_shape[0];
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(Error::shape(format!("conv bias {:?} for {co} outputs", self.shape(b))));
            }
        }
        let out_dims = geom.output_dims(in_dims)?;
        let n_out: usize = out_dims.iter().product();
        let k = ci * geom.taps();

        let cols = (!geom.is_pointwise()).then(|| kernels::im2col(&self.value(input).data, ci, in_dims, &geom, out_dims));
        let mut out = vec![T::zero(); co * n_out];
        if let Some(b) = bias {
            let bv = &self.value(b).data;
            for (o, row) in out.chunks_exact_mut(n_out).enumerate() {
                row.fill(bv[o]);
            }
        }
        {
            let cols_ref: &[T] = match &cols {
                Some(c) => c,
                None => &self.value(input).data,
            };
            kernels::gemm_acc(&mut out, &self.value(weight).data, cols_ref, co, k, n_out);
        }
        let mut shape = vec![co];
        shape.extend_from_slice(&out_dims[..rank]);
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::Conv { input, weight, bias, geom, in_dims, out_dims, cols },
            rg,
        ))
    }

    /// Affine map. `input` is `[in]` or `[batch, in]`, `weight` is `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ws = self.shape(weight).to_vec();
        let (batch, fan_in) = match xs.as_slice() {
            [n] => (1, *n),
            [b, n] => (*b, *n),
            _ => return Err(Error::shape(format!("linear input {xs:?}"))),
        };
        if ws.len() != 2 || ws[1] != fan_in {
            return Err(Error::shape(format!("linear weight {ws:?} for input {xs:?}")));
        }
        let fan_out = ws[0];
        if let Some(b) = bias {
            if self.shape(b) != [fan_out] {
                return Err(Error::shape(format!("linear bias {:?} for {fan_out} outputs", self.shape(b))));
            }
        }
        let x = &self.value(input).data;
        let w = &self.value(weight).data;
        let mut out = vec![T::zero(); batch * fan_out];
        for i in 0..batch {
            let xr = &x[i * fan_in..(i + 1) * fan_in];
            for o in 0..fan_out {
                let mut acc = kernels::dot(&w[o * fan_in..(o + 1) * fan_in], xr);
                if let Some(b) = bias {
                    acc += self.value(b).data[o];
                }
                out[i * fan_out + o] = acc;
            }
        }
        let shape = if xs.len() == 1 { vec![fan_out] } else { vec![batch, fan_out] };
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor { shape, data: out }, Op::Linear { input, weight, bias, batch }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let t = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data.iter().map(|&a| sigmoid(a)).collect();
        let t = Tensor { shape: v.shape.clone(), data };
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("add {:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| x + y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * factor).collect(),
        };
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, factor), rg)
    }

    /// Sum of any number of same-shaped nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or_else(|| Error::shape("add_all of nothing".to_string()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Concatenates along the leading axis; trailing axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing".to_string()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::shape(format!("concat {:?} with trailing {tail:?}", s)));
            }
            lead += s[0];
            data.extend_from_slice(&self.value(x).data);
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Tensor { shape, data }, Op::Concat(xs.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(format!("reshape {:?} -> {shape:?}", self.shape(x))));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: self.value(x).data.clone(),
        };
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// `out[i] = x[src[i]]`, or 0 where `src[i] == NO_SOURCE`.
    ///
    /// The backward pass scatter-adds into the sources, so max-style ops built
    /// on top route their gradient to whichever element `src` names.
    pub fn select(&mut self, x: Var, src: Vec<u32>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != src.len() {
            return Err(Error::shape(format!("select of {} into {shape:?}", src.len())));
        }
        let xv = &self.value(x).data;
        if let Some(&bad) = src.iter().find(|&&s| s != NO_SOURCE && s as usize >= xv.len()) {
            return Err(Error::shape(format!("select index {bad} out of {}", xv.len())));
        }
        let data = src
            .iter()
            .map(|&s| if s == NO_SOURCE { T::zero() } else { xv[s as usize] })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor { shape: shape.to_vec(), data }, Op::Select { input: x, src }, rg))
    }

    /// 3D (or 2D) max pooling; the gradient goes to the first maximal element.
    pub fn max_pool(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let in_dims = spatial(&shape).ok_or_else(|| Error::shape(format!("max_pool input {shape:?}")))?;
        if (0..3).any(|a| geom.pad[a] >= geom.kernel[a]) {
            return Err(Error::shape("max_pool padding must be smaller than the kernel".to_string()));
        }
        let out_dims = geom.output_dims(in_dims)?;
        let src = kernels::maxpool_argmax(&self.value(x).data, shape[0], in_dims, &geom, out_dims);
        let mut out_shape = vec![shape[0]];
        out_shape.extend_from_slice(&out_dims[..shape.len() - 1]);
        self.select(x, src, &out_shape)
    }

    /// `Σ_i w_i · CE(softmax(logits[i, :]), targets[i])` for `logits: [M, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [m, k] = s[..] else {
            return Err(Error::shape(format!("cross entropy logits {s:?}")));
        };
        if targets.len() != m || weights.len() != m || targets.iter().any(|&t| t >= k) {
            return Err(Error::shape(format!("cross entropy: {m} rows, {} targets, {} weights", targets.len(), weights.len())));
        }
        let x = &self.value(logits).data;
        let mut total = T::zero();
        for i in 0..m {
            let row = &x[i * k..(i + 1) * k];
            total += weights[i] * (log_sum_exp(row) - row[targets[i]]);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftmaxCe {
                logits,
                classes: k,
                targets: targets.iter().map(|&t| t as u32).collect(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ_i w_i · huber(pred_i − target_i; δ)`.
    pub fn huber(&mut self, pred: Var, target: &[T], weights: &[T], delta: T) -> Result<Var> {
        let n = self.value(pred).len();
        if target.len() != n || weights.len() != n || delta <= T::zero() {
            return Err(Error::shape(format!("huber over {n} values with {} targets", target.len())));
        }
        let p = &self.value(pred).data;
        let total = (0..n).map(|i| weights[i] * huber_value(p[i] - target[i], delta)).sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Huber {
                pred,
                target: target.to_vec(),
                weights: weights.to_vec(),
                delta,
            },
            rg,
        ))
    }

    /// `Σ_i w_i · BCE(sigmoid(logits_i), target_i)`, computed from logits.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let n = self.value(logits).len();
        if target.len() != n || weights.len() != n {
            return Err(Error::shape(format!("bce over {n} logits with {} targets", target.len())));
        }
        let x = &self.value(logits).data;
        let total = (0..n).map(|i| weights[i] * bce_value(x[i], target[i])).sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                logits,
                target: target.to_vec(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data.iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Hash of every piecewise branch taken (ReLU masks and select routes).
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            h ^= x;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(_) => {
                    for chunk in node.value.data.chunks(64) {
                        let bits = chunk
                            .iter()
                            .enumerate()
                            .fold(0u64, |b, (i, &v)| b | (u64::from(v > T::zero()) << i));
                        mix(bits);
                    }
                }
                Op::Select { src, .. } => src.iter().for_each(|&s| mix(u64::from(s))),
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!("backward from non-scalar {:?}", self.shape(root))));
        }
        self.backward_with(root, vec![T::one()])
    }

    /// Reverse pass seeded with an explicit output gradient.
    pub fn backward_with(&self, root: Var, seed: Vec<T>) -> Result<Grads<T>> {
        if seed.len() != self.value(root).len() {
            return Err(Error::shape("backward seed does not match root".to_string()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { input, weight, bias, geom, in_dims, out_dims, cols } => {
                let co = node.value.shape[0];
                let ci = self.shape(*input)[0];
                let k = ci * geom.taps();
                let n_out: usize = out_dims.iter().product();
                let cols_ref: &[T] = match cols {
                    Some(c) => c,
                    None => &self.value(*input).data,
                };
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for (o, row) in g.chunks_exact(n_out).enumerate() {
                            gb[o] += row.iter().copied().sum();
                        }
                    });
                }
                acc(*weight, &mut |gw| kernels::gemm_a_bt_acc(gw, g, cols_ref, co, k, n_out));
                let w = &self.value(*weight).data;
                acc(*input, &mut |gi| {
                    if geom.is_pointwise() {
                        kernels::gemm_at_b_acc(gi, w, g, co, k, n_out);
                    } else {
                        let mut dcols = vec![T::zero(); k * n_out];
                        kernels::gemm_at_b_acc(&mut dcols, w, g, co, k, n_out);
                        kernels::col2im(&dcols, ci, *in_dims, geom, *out_dims, gi);
                    }
                });
            }
            Op::Linear { input, weight, bias, batch } => {
                let fan_in = *self.shape(*weight).last().unwrap();
                let fan_out = self.shape(*weight)[0];
                let x = &self.value(*input).data;
                let w = &self.value(*weight).data;
                if let Some(b) = bias {
                    acc(*b, &mut |gb| {
                        for row in g.chunks_exact(fan_out) {
                            for (d, &s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    });
                }
                acc(*weight, &mut |gw| {
                    for i in 0..*batch {
                        let xr = &x[i * fan_in..(i + 1) * fan_in];
                        for o in 0..fan_out {
                            kernels::axpy(&mut gw[o * fan_in..(o + 1) * fan_in], g[i * fan_out + o], xr);
                        }
                    }
                });
                acc(*input, &mut |gi| {
                    for i in 0..*batch {
                        let row = &mut gi[i * fan_in..(i + 1) * fan_in];
                        for o in 0..fan_out {
                            kernels::axpy(row, g[i * fan_out + o], &w[o * fan_in..(o + 1) * fan_in]);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let y = &node.value.data;
                acc(*x, &mut |gx| {
                    for ((d, &gy), &yv) in gx.iter_mut().zip(g).zip(y) {
                        if yv > T::zero() {
                            *d += gy;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                acc(*x, &mut |gx| {
                    for ((d, &gy), &s) in gx.iter_mut().zip(g).zip(y) {
                        *d += gy * s * (T::one() - s);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| kernels::axpy(ga, T::one(), g));
                acc(*b, &mut |gb| kernels::axpy(gb, T::one(), g));
            }
            Op::Scale(x, f) => acc(*x, &mut |gx| kernels::axpy(gx, *f, g)),
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    acc(x, &mut |gx| kernels::axpy(gx, T::one(), &g[off..off + n]));
                    off += n;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| kernels::axpy(gx, T::one(), g)),
            Op::Select { input, src } => acc(*input, &mut |gx| {
                for (&s, &gy) in src.iter().zip(g) {
                    if s != NO_SOURCE {
                        gx[s as usize] += gy;
                    }
                }
            }),
            Op::SoftmaxCe { logits, classes, targets, weights } => {
                let x = &self.value(*logits).data;
                let k = *classes;
                acc(*logits, &mut |gx| {
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let row = &x[i * k..(i + 1) * k];
                        let lse = log_sum_exp(row);
                        for j in 0..k {
                            let p = (row[j] - lse).exp();
                            let y = if j == t as usize { T::one() } else { T::zero() };
                            gx[i * k + j] += g[0] * w * (p - y);
                        }
                    }
                });
            }
            Op::Huber { pred, target, weights, delta } => {
                let p = &self.value(*pred).data;
                acc(*pred, &mut |gp| {
                    for i in 0..p.len() {
                        let r = p[i] - target[i];
                        let d = if r.abs() <= *delta { r } else { *delta * r.signum() };
                        gp[i] += g[0] * weights[i] * d;
                    }
                });
            }
            Op::Bce { logits, target, weights } => {
                let x = &self.value(*logits).data;
                acc(*logits, &mut |gx| {
                    for i in 0..x.len() {
                        gx[i] += g[0] * weights[i] * (sigmoid(x[i]) - target[i]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

#[inline]
pub(crate) fn huber_value<T: Real>(r: T, delta: T) -> T {
    let a = r.abs();
    let half = T::lit(0.5);
    if a <= delta {
        half * r * r
    } else {
        delta * (a - half * delta)
    }
}

#[inline]
pub(crate) fn bce_value<T: Real>(x: T, t: T) -> T {
    x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln()
}

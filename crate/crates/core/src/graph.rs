//! Reverse-mode autodiff tape.
//!
//! Every kernel in the network is expressed as a sequence of ops recorded on a
//! [`Graph`]. Values are computed eagerly when an op is pushed; [`Graph::backward`]
//! walks the tape in reverse and returns the gradient of a scalar output with
//! respect to every node. Layout ops (window partition, shifts, pixel shuffle,
//! channel splits, max pooling) are all instances of a single index gather.

use std::collections::BTreeMap;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Static geometry of a 2-D convolution over a channel-last `[H, W, C]` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn macs(&self) -> u64 {
        (self.out_h() * self.out_w() * self.cout * (self.cin / self.groups) * self.kernel * self.kernel) as u64
    }
}

#[derive(Clone, Copy, Debug)]
struct BmmGeom {
    batch: usize,
    b_batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
}

enum Op {
    Leaf,
    /// `out[i] = concat(srcs)[index[i]]`
    Gather {
        srcs: Vec<Var>,
        index: Vec<usize>,
    },
    /// `a + beta * tile(b)`; `b` is repeated cyclically over the flat data of `a`.
    Axpy {
        a: Var,
        b: Var,
        beta: f64,
    },
    /// `a * tile(b)`
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Bmm {
        a: Var,
        b: Var,
        geom: BmmGeom,
    },
    Softmax {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        in_h: usize,
        in_w: usize,
        gh: usize,
        gw: usize,
    },
    /// Scalar computed outside the tape with a known gradient wrt `x`.
    External {
        x: Var,
        grad: Vec<f64>,
    },
    Sum {
        a: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar output wrt every node on the tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Bounds of bin `i` when `len` elements are pooled adaptively into `bins` bins.
pub fn adaptive_bin(i: usize, len: usize, bins: usize) -> (usize, usize) {
    let start = (i * len) / bins;
    let end = ((i + 1) * len).div_ceil(bins);
    (start, end)
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Materializes `op(a)` as a contiguous `rows x cols` matrix, where `a` is stored
/// as `cols x rows` when `transposed`.
fn contiguous(a: &[f64], rows: usize, cols: usize, transposed: bool) -> std::borrow::Cow<'_, [f64]> {
    if !transposed {
        return std::borrow::Cow::Borrowed(a);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = a[c * rows + r];
        }
    }
    std::borrow::Cow::Owned(out)
}

/// `out += op(a) * op(b)` with `op(a)` of shape `m x k` and `op(b)` of shape `k x n`.
fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, out: &mut [f64]) {
    let a = contiguous(a, m, k, ta);
    let b = contiguous(b, k, n, tb);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    contiguous(a, cols, rows, true).into_owned()
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

pub struct Graph {
    nodes: Vec<Node>,
    macs: BTreeMap<String, u64>,
    tag: String,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            macs: BTreeMap::new(),
            tag: "untagged".to_string(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the label under which subsequent matmul/conv MACs are tallied; returns the previous label.
    pub fn set_tag(&mut self, tag: impl Into<String>) -> String {
        std::mem::replace(&mut self.tag, tag.into())
    }

    pub fn mac_tally(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    fn count(&mut self, macs: u64) {
        *self.macs.entry(self.tag.clone()).or_insert(0) += macs;
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Gathers elements from the flat concatenation of `srcs`.
    pub fn gather(&mut self, srcs: &[Var], index: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(
            index.len(),
            shape.iter().product::<usize>(),
            "gather index/shape mismatch"
        );
        let mut offsets = Vec::with_capacity(srcs.len());
        let mut total = 0;
        for s in srcs {
            offsets.push(total);
            total += self.nodes[s.0].value.len();
        }
        let mut data = Vec::with_capacity(index.len());
        for &i in &index {
            let which = offsets.partition_point(|&o| o <= i) - 1;
            data.push(self.nodes[srcs[which].0].value.data()[i - offsets[which]]);
        }
        let out = Tensor::new(shape.to_vec(), data);
        self.push(
            out,
            Op::Gather {
                srcs: srcs.to_vec(),
                index,
            },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let n = self.nodes[a.0].value.len();
        self.gather(&[a], (0..n).collect(), shape)
    }

    fn axpy(&mut self, a: Var, b: Var, beta: f64) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(
            !bv.is_empty() && av.len() % bv.len() == 0,
            "cannot tile shape {:?} over {:?}",
            bv.shape(),
            av.shape()
        );
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + beta * bv.data()[i % bl])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, Op::Axpy { a, b, beta })
    }

    /// `a + b`, with `b` tiled when it is smaller (e.g. a per-channel bias).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.axpy(a, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.axpy(a, b, -1.0)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert!(
            !bv.is_empty() && av.len() % bv.len() == 0,
            "cannot tile shape {:?} over {:?}",
            bv.shape(),
            av.shape()
        );
        let bl = bv.len();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv.data()[i % bl])
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect());
        self.push(out, Op::Scale { a, c })
    }

    /// Batched matmul. `a` is `[batch, m, k]` (`[batch, k, m]` if `ta`), `b` is
    /// `[b_batch, k, n]` (`[b_batch, n, k]` if `tb`); batch item `i` of `a` pairs with
    /// item `i % b_batch` of `b`. Rank-2 operands are treated as batch 1.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let split = |s: &[usize]| -> (usize, usize, usize) {
            match s.len() {
                2 => (1, s[0], s[1]),
                3 => (s[0], s[1], s[2]),
                _ => panic!("bmm expects rank 2 or 3, got {:?}", s),
            }
        };
        let (batch, a0, a1) = split(&ash);
        let (b_batch, b0, b1) = split(&bsh);
        let (m, k) = if ta { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if tb { (b1, b0) } else { (b0, b1) };
        assert_eq!(k, kb, "bmm inner dims differ: {:?} x {:?}", ash, bsh);
        assert!(
            batch % b_batch == 0,
            "bmm batch {} not a multiple of {}",
            batch,
            b_batch
        );
        let geom = BmmGeom {
            batch,
            b_batch,
            m,
            k,
            n,
            ta,
            tb,
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for i in 0..batch {
                let bi = i % b_batch;
                gemm_acc(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    ta,
                    &bd[bi * k * n..(bi + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        self.count((batch * m * k * n) as u64);
        let shape = if ash.len() == 2 && bsh.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        self.push(Tensor::new(shape, out), Op::Bmm { a, b, geom })
    }

    /// Plain matmul of the flattened leading axes of `a` against a `[k, n]` weight.
    pub fn linear(&mut self, a: Var, w: Var, bias: Option<Var>) -> Var {
        let ash = self.shape(a).to_vec();
        let k = *ash.last().expect("linear on scalar");
        let rows = ash.iter().product::<usize>() / k;
        let n = self.shape(w)[1];
        let flat = self.reshape(a, &[rows, k]);
        let mut y = self.bmm(flat, w, false, false);
        if let Some(b) = bias {
            y = self.add(y, b);
        }
        let mut out_shape = ash;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(y, &out_shape)
    }

    /// Softmax over the last axis, computed with max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = *av.shape().last().unwrap();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data);
        self.push(out, Op::Softmax { a })
    }

    fn unary(&mut self, a: Var, f: fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect());
        self.push(out, op)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    /// Normalizes over the last axis, then applies per-channel `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let rows = xv.len() / c;
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c, "layer_norm gamma length");
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// 2-D convolution on an `[H, W, Cin]` map with weight `[Cout, Cin/groups, k, k]`
    /// and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [H, W, C]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin/g, k, k]");
        let geom = ConvGeom {
            in_h: xs[0],
            in_w: xs[1],
            cin: xs[2],
            cout: ws[0],
            kernel: ws[2],
            stride,
            pad,
            groups,
        };
        assert_eq!(ws[2], ws[3], "square kernels only");
        assert!(geom.cin % groups == 0 && geom.cout % groups == 0, "bad conv groups");
        assert_eq!(ws[1], geom.cin / groups, "conv weight cin mismatch");
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        self.count(geom.macs());
        let out = Tensor::new(vec![geom.out_h(), geom.out_w(), geom.cout], out);
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    /// Adaptive average pooling of an `[H, W, C]` map to a `[gh, gw, C]` grid.
    pub fn adaptive_avg_pool(&mut self, x: Var, gh: usize, gw: usize) -> Var {
        let xv = self.value(x);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; gh * gw * c];
        for i in 0..gh {
            let (y0, y1) = adaptive_bin(i, h, gh);
            for j in 0..gw {
                let (x0, x1) = adaptive_bin(j, w, gw);
                let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                let o = &mut out[(i * gw + j) * c..(i * gw + j + 1) * c];
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let row = &xv.data()[(y * w + xx) * c..(y * w + xx + 1) * c];
                        for (ov, v) in o.iter_mut().zip(row) {
                            *ov += v;
                        }
                    }
                }
                for ov in o.iter_mut() {
                    *ov /= cnt;
                }
            }
        }
        let out = Tensor::new(vec![gh, gw, c], out);
        self.push(
            out,
            Op::AvgPool {
                x,
                in_h: h,
                in_w: w,
                gh,
                gw,
            },
        )
    }

    /// Adaptive max pooling of an `[H, W, C]` map to a `[gh, gw, C]` grid. Ties go to the
    /// first element in row-major order; the gradient flows to the selected element only.
    pub fn adaptive_max_pool(&mut self, x: Var, gh: usize, gw: usize) -> Var {
        let xv = self.value(x);
        let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut index = vec![0usize; gh * gw * c];
        for i in 0..gh {
            let (y0, y1) = adaptive_bin(i, h, gh);
            for j in 0..gw {
                let (x0, x1) = adaptive_bin(j, w, gw);
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = (y0 * w + x0) * c + ch;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            let k = (y * w + xx) * c + ch;
                            if xv.data()[k] > best {
                                best = xv.data()[k];
                                arg = k;
                            }
                        }
                    }
                    index[(i * gw + j) * c + ch] = arg;
                }
            }
        }
        self.gather(&[x], index, &[gh, gw, c])
    }

    /// Records a scalar whose value and gradient wrt `x` were computed elsewhere.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Var {
        assert_eq!(grad.len(), self.value(x).len(), "external gradient length");
        self.push(Tensor::scalar(value), Op::External { x, grad })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradient of the scalar `out` wrt every node on the tape.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for idx in (0..=out.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Gather { srcs, index } => {
                    let mut offsets = Vec::with_capacity(srcs.len());
                    let mut total = 0;
                    for s in srcs {
                        offsets.push(total);
                        total += self.nodes[s.0].value.len();
                    }
                    let mut combined = vec![0.0; total];
                    for (g, &i) in gout.iter().zip(index) {
                        combined[i] += g;
                    }
                    for (s, &off) in srcs.iter().zip(&offsets) {
                        let n = self.nodes[s.0].value.len();
                        let slot = accumulate(&mut grads[s.0], n);
                        for (d, g) in slot.iter_mut().zip(&combined[off..off + n]) {
                            *d += g;
                        }
                    }
                }
                Op::Axpy { a, b, beta } => {
                    let bl = self.nodes[b.0].value.len();
                    {
                        let ga = accumulate(&mut grads[a.0], gout.len());
                        for (d, g) in ga.iter_mut().zip(&gout) {
                            *d += g;
                        }
                    }
                    let gb = accumulate(&mut grads[b.0], bl);
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % bl] += beta * g;
                    }
                }
                Op::Mul { a, b } => {
                    let avd = self.nodes[a.0].value.data();
                    let bvd = self.nodes[b.0].value.data();
                    let bl = bvd.len();
                    {
                        let ga = accumulate(&mut grads[a.0], gout.len());
                        for (i, g) in gout.iter().enumerate() {
                            ga[i] += g * bvd[i % bl];
                        }
                    }
                    let gb = accumulate(&mut grads[b.0], bl);
                    for (i, g) in gout.iter().enumerate() {
                        gb[i % bl] += g * avd[i];
                    }
                }
                Op::Scale { a, c } => {
                    let ga = accumulate(&mut grads[a.0], gout.len());
                    for (d, g) in ga.iter_mut().zip(&gout) {
                        *d += c * g;
                    }
                }
                Op::Bmm { a, b, geom } => {
                    let BmmGeom {
                        batch,
                        b_batch,
                        m,
                        k,
                        n,
                        ta,
                        tb,
                    } = *geom;
                    let ad = self.nodes[a.0].value.data();
                    let bd = self.nodes[b.0].value.data();
                    let mut gad = vec![0.0; batch * m * k];
                    let mut gbd = vec![0.0; b_batch * k * n];
                    for i in 0..batch {
                        let bi = i % b_batch;
                        let go = &gout[i * m * n..(i + 1) * m * n];
                        let aop = contiguous(&ad[i * m * k..(i + 1) * m * k], m, k, ta);
                        let bop = contiguous(&bd[bi * k * n..(bi + 1) * k * n], k, n, tb);
                        // d op(a) = gout * op(b)^T ; d op(b) = op(a)^T * gout
                        let mut da = vec![0.0; m * k];
                        gemm_acc(m, n, k, go, false, &transpose(&bop, k, n), false, &mut da);
                        let mut db = vec![0.0; k * n];
                        gemm_acc(k, m, n, &transpose(&aop, m, k), false, go, false, &mut db);
                        let da = if ta { transpose(&da, m, k) } else { da };
                        let db = if tb { transpose(&db, k, n) } else { db };
                        for (d, v) in gad[i * m * k..(i + 1) * m * k].iter_mut().zip(&da) {
                            *d += v;
                        }
                        for (d, v) in gbd[bi * k * n..(bi + 1) * k * n].iter_mut().zip(&db) {
                            *d += v;
                        }
                    }
                    for (d, v) in accumulate(&mut grads[a.0], gad.len()).iter_mut().zip(&gad) {
                        *d += v;
                    }
                    for (d, v) in accumulate(&mut grads[b.0], gbd.len()).iter_mut().zip(&gbd) {
                        *d += v;
                    }
                }
                Op::Softmax { a } => {
                    let y = node.value.data();
                    let n = *node.value.shape().last().unwrap();
                    let ga = accumulate(&mut grads[a.0], gout.len());
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &gout[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            ga[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
                Op::Gelu { a } => {
                    let xs = self.nodes[a.0].value.data();
                    let ga = accumulate(&mut grads[a.0], gout.len());
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * gelu_grad(xs[i]);
                    }
                }
                Op::Relu { a } => {
                    let xs = self.nodes[a.0].value.data();
                    let ga = accumulate(&mut grads[a.0], gout.len());
                    for i in 0..gout.len() {
                        if xs[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                }
                Op::Sigmoid { a } => {
                    let y = node.value.data();
                    let ga = accumulate(&mut grads[a.0], gout.len());
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let c = self.nodes[gamma.0].value.len();
                    let g = self.nodes[gamma.0].value.data();
                    let rows = gout.len() / c;
                    let mut gg = vec![0.0; c];
                    let mut gb = vec![0.0; c];
                    let mut gx = vec![0.0; gout.len()];
                    for r in 0..rows {
                        let go = &gout[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..c {
                            gg[j] += go[j] * xh[j];
                            gb[j] += go[j];
                            let d = go[j] * g[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let cf = c as f64;
                        for j in 0..c {
                            let d = go[j] * g[j];
                            gx[r * c + j] = rstd[r] * (d - sum_d / cf - xh[j] * sum_dx / cf);
                        }
                    }
                    for (d, v) in accumulate(&mut grads[x.0], gx.len()).iter_mut().zip(&gx) {
                        *d += v;
                    }
                    for (d, v) in accumulate(&mut grads[gamma.0], c).iter_mut().zip(&gg) {
                        *d += v;
                    }
                    for (d, v) in accumulate(&mut grads[beta.0], c).iter_mut().zip(&gb) {
                        *d += v;
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let xd = self.nodes[x.0].value.data();
                    let wd = self.nodes[w.0].value.data();
                    let (gx, gw, gb) = conv_backward(xd, wd, &gout, geom);
                    for (d, v) in accumulate(&mut grads[x.0], gx.len()).iter_mut().zip(&gx) {
                        *d += v;
                    }
                    for (d, v) in accumulate(&mut grads[w.0], gw.len()).iter_mut().zip(&gw) {
                        *d += v;
                    }
                    if let Some(b) = b {
                        for (d, v) in accumulate(&mut grads[b.0], gb.len()).iter_mut().zip(&gb) {
                            *d += v;
                        }
                    }
                }
                Op::AvgPool { x, in_h, in_w, gh, gw } => {
                    let c = node.value.shape()[2];
                    let gx = accumulate(&mut grads[x.0], in_h * in_w * c);
                    for i in 0..*gh {
                        let (y0, y1) = adaptive_bin(i, *in_h, *gh);
                        for j in 0..*gw {
                            let (x0, x1) = adaptive_bin(j, *in_w, *gw);
                            let cnt = ((y1 - y0) * (x1 - x0)) as f64;
                            let go = &gout[(i * gw + j) * c..(i * gw + j + 1) * c];
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    let base = (y * in_w + xx) * c;
                                    for ch in 0..c {
                                        gx[base + ch] += go[ch] / cnt;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::External { x, grad } => {
                    let gx = accumulate(&mut grads[x.0], grad.len());
                    for (d, v) in gx.iter_mut().zip(grad) {
                        *d += gout[0] * v;
                    }
                }
                Op::Sum { a } => {
                    let n = self.nodes[a.0].value.len();
                    let ga = accumulate(&mut grads[a.0], n);
                    for d in ga.iter_mut() {
                        *d += gout[0];
                    }
                }
            }
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let k = g.kernel;
    // repack to [group][ky][kx][ci][co_local] so the innermost loop is contiguous
    let mut wp = vec![0.0; g.groups * k * k * cin_g * cout_g];
    for co in 0..g.cout {
        let grp = co / cout_g;
        let col = co % cout_g;
        for ci in 0..cin_g {
            for ky in 0..k {
                for kx in 0..k {
                    let src = ((co * cin_g + ci) * k + ky) * k + kx;
                    let dst = (((grp * k + ky) * k + kx) * cin_g + ci) * cout_g + col;
                    wp[dst] = w[src];
                }
            }
        }
    }
    let mut out = vec![0.0; oh * ow * g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * g.cout..(oy * ow + ox + 1) * g.cout];
            if let Some(b) = b {
                o.copy_from_slice(b);
            }
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let xin = &x[(iy as usize * g.in_w + ix as usize) * g.cin..][..g.cin];
                    for grp in 0..g.groups {
                        let og = &mut o[grp * cout_g..(grp + 1) * cout_g];
                        for ci in 0..cin_g {
                            let xv = xin[grp * cin_g + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &wp[(((grp * k + ky) * k + kx) * cin_g + ci) * cout_g..][..cout_g];
                            for (ov, wv) in og.iter_mut().zip(wrow) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(x: &[f64], w: &[f64], gout: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let k = g.kernel;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &gout[(oy * ow + ox) * g.cout..(oy * ow + ox + 1) * g.cout];
            for (d, v) in gb.iter_mut().zip(go) {
                *d += v;
            }
            for ky in 0..k {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let base = (iy as usize * g.in_w + ix as usize) * g.cin;
                    for co in 0..g.cout {
                        let gv = go[co];
                        if gv == 0.0 {
                            continue;
                        }
                        let grp = co / cout_g;
                        for ci in 0..cin_g {
                            let widx = ((co * cin_g + ci) * k + ky) * k + kx;
                            let xi = base + grp * cin_g + ci;
                            gw[widx] += gv * x[xi];
                            gx[xi] += gv * w[widx];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    /// Central-difference check of d(sum(w * f(x)))/dx for a single-input op.
    fn check_op(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rnd = lcg(7);
        let x0 = Tensor::from_fn(shape, |_| rnd());
        let probe = {
            let mut g = Graph::new();
            let x = g.leaf(x0.clone());
            let y = build(&mut g, x);
            let n = g.value(y).len();
            let mut r = lcg(11);
            Tensor::from_fn(&[n], |_| r())
        };
        let eval = |xt: &Tensor| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let x = g.leaf(xt.clone());
            let y = build(&mut g, x);
            let ys = g.shape(y).to_vec();
            let p = g.leaf(probe.clone().reshape(&ys));
            let prod = g.mul(y, p);
            let s = g.sum(prod);
            let grads = g.backward(s);
            (g.value(s).data()[0], grads.get(x).unwrap().to_vec())
        };
        let (_, analytic) = eval(&x0);
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let num = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-8);
            assert!(err < 1e-5, "elem {}: analytic {} numeric {}", i, analytic[i], num);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let mut r = lcg(3);
        let x = g.leaf(Tensor::from_fn(&[5, 7], |_| 10.0 * r()));
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn elementwise_grads() {
        check_op(&[3, 4], |g, x| g.gelu(x));
        check_op(&[3, 4], |g, x| g.sigmoid(x));
        check_op(&[3, 4], |g, x| g.softmax(x));
        check_op(&[3, 4], |g, x| {
            let y = g.scale(x, 0.5);
            g.mul(x, y)
        });
    }

    #[test]
    fn bmm_grads_all_transpose_flags() {
        for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
            check_op(&[4, 3, 3], move |g, x| {
                let mut r = lcg(5);
                let w = g.leaf(Tensor::from_fn(&[2, 3, 3], |_| r()));
                let a = g.bmm(x, w, ta, tb);
                g.bmm(x, a, ta, tb)
            });
            // gradient into the broadcast operand
            check_op(&[2, 3, 3], move |g, x| {
                let mut r = lcg(6);
                let a = g.leaf(Tensor::from_fn(&[4, 3, 3], |_| r()));
                g.bmm(a, x, ta, tb)
            });
        }
    }

    #[test]
    fn layer_norm_grad() {
        check_op(&[3, 5], |g, x| {
            let gamma = g.leaf(Tensor::from_fn(&[5], |i| 0.5 + i as f64 * 0.1));
            let beta = g.leaf(Tensor::from_fn(&[5], |i| i as f64 * 0.01));
            g.layer_norm(x, gamma, beta, 1e-6)
        });
    }

    #[test]
    fn conv_grads_strided_grouped() {
        check_op(&[5, 6, 4], |g, x| {
            let mut r = lcg(9);
            let w = g.leaf(Tensor::from_fn(&[4, 1, 3, 3], |_| r()));
            let b = g.leaf(Tensor::from_fn(&[4], |_| r()));
            let d = g.conv2d(x, w, Some(b), 2, 1, 4);
            let w2 = g.leaf(Tensor::from_fn(&[6, 2, 3, 3], |_| r()));
            g.conv2d(d, w2, None, 1, 1, 2)
        });
    }

    #[test]
    fn pooling_grads() {
        check_op(&[5, 6, 2], |g, x| g.adaptive_avg_pool(x, 2, 4));
        check_op(&[5, 6, 2], |g, x| g.adaptive_max_pool(x, 3, 2));
    }

    #[test]
    fn conv_counts_macs() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[4, 4, 3]));
        let w = g.leaf(Tensor::zeros(&[5, 3, 3, 3]));
        g.set_tag("conv");
        g.conv2d(x, w, None, 1, 1, 1);
        assert_eq!(g.mac_tally()["conv"], 4 * 4 * 5 * 3 * 9);
    }

    #[test]
    fn adaptive_bins_cover_range() {
        assert_eq!(adaptive_bin(0, 5, 2), (0, 3));
        assert_eq!(adaptive_bin(1, 5, 2), (2, 5));
        assert_eq!(adaptive_bin(3, 8, 4), (6, 8));
    }
}

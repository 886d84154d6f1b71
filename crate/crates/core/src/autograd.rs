//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! Every operation appends a node holding its forward value plus whatever
//! the backward pass needs. [`Tape::backward`] walks the nodes in reverse
//! and accumulates gradients for every node that (transitively) depends on
//! a leaf created with `requires_grad = true`.
//!
//! Image activations use the channel-major layout `[C, N, H, W]` so that a
//! convolution is a single GEMM whose output is already in that layout and
//! batch normalisation works on contiguous rows.

use crate::tensor::{matmul, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over `[C, N, H, W]` activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

pub const BN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Shift(Var),
    AddRowBias(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Elu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Reshape(Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        cols: Option<Tensor<T>>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    BatchNormFixed {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    GlobalAvgPool {
        x: Var,
        spatial: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    CosineMean {
        a: Var,
        b: Var,
        cos: Vec<T>,
        norms: Vec<(T, T)>,
    },
    StdNormalize {
        x: Var,
        target: T,
        std: T,
    },
    Recentre(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant `c`.
    pub fn shift(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Shift(a), rg)
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let n = self.value(b).len();
        assert_eq!(xv.len() % n.max(1), 0, "bias width does not divide input");
        let bv = self.value(b).data();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv) {
                *o = *o + bb;
            }
        }
        let rg = self.rg(&[x, b]);
        self.push(out, Op::AddRowBias(x, b), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// 2-D product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, trans_a: bool, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        assert!(sa.len() == 2 && sb.len() == 2, "matmul needs 2-D operands");
        let (m, k) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, k2, "matmul inner dimensions {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); m * n];
        matmul(
            self.value(a).data(),
            trans_a,
            self.value(b).data(),
            trans_b,
            &mut out,
            m,
            k,
            n,
            T::zero(),
        );
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::new(vec![m, n], out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    /// ELU with `alpha = 1`.
    pub fn elu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > T::zero() { a } else { a.exp() - T::one() });
        let rg = self.rg(&[x]);
        self.push(v, Op::Elu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        let rg = self.rg(&[x]);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let rg = self.rg(&[x]);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.exp());
        let rg = self.rg(&[x]);
        self.push(v, Op::Exp(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(v, Op::Reshape(x), rg)
    }

    /// `out[i] = x.flat[idx[i]]`, reshaped to `shape`. Covers slicing,
    /// tiling, row selection and transposition.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        let xv = self.value(x).data();
        let data: Vec<T> = idx.iter().map(|&i| xv[i]).collect();
        let v = Tensor::new(shape.to_vec(), data);
        let rg = self.rg(&[x]);
        self.push(v, Op::Gather { x, idx }, rg)
    }

    /// Rows `rows` of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let w = self.value(x).shape()[1];
        let idx = rows
            .iter()
            .flat_map(|&r| (r * w)..(r * w + w))
            .collect::<Vec<_>>();
        self.gather(x, idx, &[rows.len(), w])
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.value(x).shape();
        let (rows, w) = (s[0], s[1]);
        let idx = (0..rows)
            .flat_map(|r| (r * w + start)..(r * w + start + len))
            .collect::<Vec<_>>();
        self.gather(x, idx, &[rows, len])
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2, "concat_cols needs 2-D parts");
                assert_eq!(s[0], rows, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::new(vec![rows, total], data),
            Op::ConcatCols {
                parts: parts.iter().copied().zip(widths).collect(),
                rows,
            },
            rg,
        )
    }

    /// Convolution of `x: [C, N, H, W]` with `w: [O, C, k, k]` giving
    /// `[O, N, Ho, Wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [C, N, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [O, C, k, k]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert_eq!(ws[2], ws[3], "conv2d needs square kernels");
        let geom = ConvGeom {
            in_ch: xs[0],
            batch: xs[1],
            height: xs[2],
            width: xs[3],
            out_ch: ws[0],
            kernel: ws[2],
            stride,
            padding,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let rows = geom.col_rows();
        let cols_n = geom.col_cols();
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(im2col(self.value(x).data(), &geom))
        };
        let mut out = vec![T::zero(); geom.out_ch * cols_n];
        {
            let b = match &cols {
                Some(c) => c.data(),
                None => self.value(x).data(),
            };
            matmul(
                self.value(w).data(),
                false,
                b,
                false,
                &mut out,
                geom.out_ch,
                rows,
                cols_n,
                T::zero(),
            );
        }
        let rg = self.rg(&[x, w]);
        let cols = if rg { cols } else { None };
        self.push(
            Tensor::new(vec![geom.out_ch, geom.batch, ho, wo], out),
            Op::Conv2d { x, w, cols, geom },
            rg,
        )
    }

    /// Batch normalisation with statistics of the current batch, per
    /// channel (axis 0) of `x`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let l = xv.len() / c;
        let eps = T::lit(BN_EPS);
        let ln = T::lit(l as f64);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), c, "batch_norm scale length");
        assert_eq!(b.len(), c, "batch_norm shift length");
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ch in 0..c {
            let row = &xv.data()[ch * l..(ch + 1) * l];
            let mean = row.iter().copied().sum::<T>() / ln;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / ln;
            let is = T::one() / (var + eps).sqrt();
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat[ch * l + i] = h;
                out[ch * l + i] = g[ch] * h + b[ch];
            }
            inv_std[ch] = is;
            means[ch] = mean;
            vars[ch] = var;
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mean: means,
                var: vars,
            },
            rg,
        )
    }

    /// Batch mean and unbiased variance recorded by a [`Tape::batch_norm`]
    /// node, for running-statistics updates.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(Vec<T>, Vec<T>)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, var, xhat, .. } => {
                let l = xhat.len() / mean.len();
                let corr = if l > 1 {
                    T::lit(l as f64 / (l as f64 - 1.0))
                } else {
                    T::one()
                };
                Some((mean.clone(), var.iter().map(|&v| v * corr).collect()))
            }
            _ => None,
        }
    }

    /// Batch normalisation with supplied statistics (inference mode).
    pub fn batch_norm_fixed(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
    ) -> Var {
        let xv = self.value(x);
        let c = xv.shape()[0];
        let l = xv.len() / c;
        assert_eq!(mean.len(), c);
        assert_eq!(var.len(), c);
        let eps = T::lit(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            for i in 0..l {
                let k = ch * l + i;
                out[k] = g[ch] * (xv.data()[k] - mean[ch]) * inv_std[ch] + b[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::new(shape, out),
            Op::BatchNormFixed {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        )
    }

    /// `[C, N, H, W] -> [C, N]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s.len(), 4);
        let spatial = s[2] * s[3];
        let inv = T::one() / T::lit(spatial as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(vec![s[0], s[1]], out),
            Op::GlobalAvgPool { x, spatial },
            rg,
        )
    }

    /// Mean softmax cross-entropy of `logits: [N, K]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        assert_eq!(labels.len(), n, "cross_entropy label count");
        let probs = softmax_rows(lv.data(), k);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            assert!(y < k, "label {y} out of range for {k} classes");
            let row = &lv.data()[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            loss = loss + lse - row[y];
        }
        let loss = loss / T::lit(n as f64);
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean over rows of the cosine similarity between matching rows of
    /// `a` and `b`. Rows where either vector has zero norm contribute 0;
    /// see [`Tape::zero_norm_rows`].
    pub fn cosine_mean(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "cosine_mean shape mismatch");
        let n = av.shape()[0];
        let w = av.len() / n.max(1);
        let mut cos = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let (ra, rb) = (&av.data()[i * w..(i + 1) * w], &bv.data()[i * w..(i + 1) * w]);
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            let na = ra.iter().map(|&x| x * x).sum::<T>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<T>().sqrt();
            let c = if na > T::zero() && nb > T::zero() {
                dot / (na * nb)
            } else {
                T::zero()
            };
            cos.push(c);
            norms.push((na, nb));
        }
        let mean = if n == 0 {
            T::zero()
        } else {
            cos.iter().copied().sum::<T>() / T::lit(n as f64)
        };
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(mean), Op::CosineMean { a, b, cos, norms }, rg)
    }

    /// Number of rows a [`Tape::cosine_mean`] node treated as zero-norm.
    pub fn zero_norm_rows(&self, v: Var) -> usize {
        match &self.nodes[v.0].op {
            Op::CosineMean { norms, .. } => norms
                .iter()
                .filter(|(a, b)| *a == T::zero() || *b == T::zero())
                .count(),
            _ => 0,
        }
    }

    /// Rescale `x` so its population standard deviation equals `target`.
    /// A constant input maps to zeros.
    pub fn std_normalize(&mut self, x: Var, target: T) -> Var {
        let xv = self.value(x);
        let n = T::lit(xv.len() as f64);
        let mean = xv.sum() / n;
        let var = xv.data().iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let std = var.sqrt();
        let out = if std > T::zero() {
            xv.map(|v| v * target / std)
        } else {
            Tensor::zeros(xv.shape())
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::StdNormalize { x, target, std }, rg)
    }

    /// `x - mean(x) + offset`.
    pub fn recentre(&mut self, x: Var, offset: T) -> Var {
        let xv = self.value(x);
        let mean = xv.mean();
        let out = xv.map(|v| v - mean + offset);
        let rg = self.rg(&[x]);
        self.push(out, Op::Recentre(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::Shift(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut gb = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, gb));
                }
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    // dA = dC * op(B)^T, stored in A's layout.
                    let mut ga = vec![T::zero(); m * k];
                    let bv = self.value(*b).data();
                    if *trans_a {
                        // A stored k×m: dA^T = op(B) * dC^T
                        matmul(bv, *trans_b, g.data(), true, &mut ga, k, n, m, T::zero());
                    } else {
                        matmul(g.data(), false, bv, !*trans_b, &mut ga, m, n, k, T::zero());
                    }
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(grads, *a, Tensor::new(shape, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    let av = self.value(*a).data();
                    if *trans_b {
                        // B stored n×k: dB^T = dC^T * op(A)
                        matmul(g.data(), true, av, *trans_a, &mut gb, n, m, k, T::zero());
                    } else {
                        matmul(av, !*trans_a, g.data(), false, &mut gb, k, m, n, T::zero());
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, gb));
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, *x, gx);
            }
            Op::Elu(x) => {
                let gx = g.zip_map(y, |gv, yv| {
                    if yv > T::zero() {
                        gv
                    } else {
                        gv * (yv + T::one())
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv));
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let gx = g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv));
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.zip_map(y, |gv, yv| gv * yv);
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::full(&shape, gv));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape));
            }
            Op::Gather { x, idx } => {
                let xs = self.value(*x).shape().to_vec();
                let mut gx = Tensor::zeros(&xs);
                let d = gx.data_mut();
                for (&src, &gv) in idx.iter().zip(g.data()) {
                    d[src] = d[src] + gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            gp.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, p, Tensor::new(vec![*rows, w], gp));
                    }
                    off += w;
                }
            }
            Op::Conv2d { x, w, cols, geom } => {
                let rows = geom.col_rows();
                let ncols = geom.col_cols();
                let xdata = self.value(*x).data();
                let b = match cols {
                    Some(c) => c.data(),
                    None => xdata,
                };
                if self.wants(*w) {
                    let mut gw = vec![T::zero(); geom.out_ch * rows];
                    matmul(g.data(), false, b, true, &mut gw, geom.out_ch, ncols, rows, T::zero());
                    let shape = self.value(*w).shape().to_vec();
                    self.accumulate(grads, *w, Tensor::new(shape, gw));
                }
                if self.wants(*x) {
                    let mut gcols = vec![T::zero(); rows * ncols];
                    matmul(
                        self.value(*w).data(),
                        true,
                        g.data(),
                        false,
                        &mut gcols,
                        rows,
                        geom.out_ch,
                        ncols,
                        T::zero(),
                    );
                    let gx = if geom.is_pointwise() {
                        gcols
                    } else {
                        col2im(&gcols, geom)
                    };
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, gx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                ..
            } => {
                let c = inv_std.len();
                let l = xhat.len() / c;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for i in ch * l..(ch + 1) * l {
                        s1 = s1 + gd[i];
                        s2 = s2 + gd[i] * xhat[i];
                    }
                    gbeta[ch] = s1;
                    gg[ch] = s2;
                }
                if self.wants(*x) {
                    let ln = T::lit(l as f64);
                    let mut gx = vec![T::zero(); xhat.len()];
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch] / ln;
                        for i in ch * l..(ch + 1) * l {
                            gx[i] = k * (ln * gd[i] - gbeta[ch] - xhat[i] * gg[ch]);
                        }
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, gx));
                }
                let gshape = self.value(*gamma).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, gg));
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *beta, Tensor::new(bshape, gbeta));
            }
            Op::BatchNormFixed {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let c = inv_std.len();
                let xv = self.value(*x).data();
                let l = xv.len() / c;
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); xv.len()];
                for ch in 0..c {
                    for i in ch * l..(ch + 1) * l {
                        gbeta[ch] = gbeta[ch] + gd[i];
                        gg[ch] = gg[ch] + gd[i] * (xv[i] - mean[ch]) * inv_std[ch];
                        gx[i] = gd[i] * gam[ch] * inv_std[ch];
                    }
                }
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, gx));
                let gshape = self.value(*gamma).shape().to_vec();
                self.accumulate(grads, *gamma, Tensor::new(gshape, gg));
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *beta, Tensor::new(bshape, gbeta));
            }
            Op::GlobalAvgPool { x, spatial } => {
                let inv = T::one() / T::lit(*spatial as f64);
                let gx: Vec<T> = g
                    .data()
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * inv, *spatial))
                    .collect();
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(shape, gx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n.max(1);
                let scale = g.item() / T::lit(n as f64);
                let mut gl = probs.clone();
                for (i, &yl) in labels.iter().enumerate() {
                    gl[i * k + yl] = gl[i * k + yl] - T::one();
                }
                for v in gl.iter_mut() {
                    *v = *v * scale;
                }
                let shape = self.value(*logits).shape().to_vec();
                self.accumulate(grads, *logits, Tensor::new(shape, gl));
            }
            Op::CosineMean { a, b, cos, norms } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let n = cos.len();
                let w = av.len() / n.max(1);
                let scale = g.item() / T::lit(n as f64);
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for i in 0..n {
                    let (na, nb) = norms[i];
                    if na == T::zero() || nb == T::zero() {
                        continue;
                    }
                    for j in i * w..(i + 1) * w {
                        let (x, y) = (av.data()[j], bv.data()[j]);
                        ga[j] = scale * (y / (na * nb) - cos[i] * x / (na * na));
                        gb[j] = scale * (x / (na * nb) - cos[i] * y / (nb * nb));
                    }
                }
                let sa = av.shape().to_vec();
                let sb = bv.shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(sa, ga));
                self.accumulate(grads, *b, Tensor::new(sb, gb));
            }
            Op::StdNormalize { x, target, std } => {
                if *std > T::zero() {
                    let xv = self.value(*x);
                    let n = T::lit(xv.len() as f64);
                    let mean = xv.mean();
                    let dot: T = g.data().iter().zip(xv.data()).map(|(&a, &b)| a * b).sum();
                    let s = *std;
                    let k1 = *target / s;
                    let k2 = *target * dot / (n * s * s * s);
                    let gx = g.zip_map(xv, |gv, xvv| k1 * gv - k2 * (xvv - mean));
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Recentre(x) => {
                let m = g.mean();
                self.accumulate(grads, *x, g.map(|v| v - m));
            }
        }
    }
}

fn softmax_rows<T: Scalar>(logits: &[T], k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, o) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for (ov, &v) in o.iter_mut().zip(row) {
            *ov = (v - mx).exp();
            s = s + *ov;
        }
        for ov in o.iter_mut() {
            *ov = *ov / s;
        }
    }
    out
}

/// Row-wise softmax of a `[N, K]` buffer.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[1];
    Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), k))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Tensor<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let (rows, cols) = (g.col_rows(), g.col_cols());
    let mut out = vec![T::zero(); rows * cols];
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let orow = &mut out[r * cols..(r + 1) * cols];
                for n in 0..g.batch {
                    let plane = &x[(c * g.batch + n) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let base = (n * ho + oh) * wo;
                        let src = &plane[ih as usize * g.width..][..g.width];
                        for ow in 0..wo {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                orow[base + ow] = src[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows, cols], out)
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let ncols = g.col_cols();
    let mut x = vec![T::zero(); g.in_ch * g.batch * g.height * g.width];
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ki in 0..k {
            for kj in 0..k {
                let r = (c * k + ki) * k + kj;
                let crow = &cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.batch {
                    let plane =
                        &mut x[(c * g.batch + n) * g.height * g.width..][..g.height * g.width];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let base = (n * ho + oh) * wo;
                        let dst = &mut plane[ih as usize * g.width..][..g.width];
                        for ow in 0..wo {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw >= 0 && iw < g.width as isize {
                                dst[iw as usize] = dst[iw as usize] + crow[base + ow];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

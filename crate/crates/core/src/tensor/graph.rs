use std::sync::Arc;

use rayon::prelude::*;

use super::{shape_err, Real, Result, Tensor, TensorError};

const LN_EPS: f64 = 1e-5;
/// Floor used by the KL-divergence loss, shared with `metrics::kld`.
pub const KLD_EPS: f64 = 1e-7;
// Below this many multiply-adds a kernel runs on the calling thread.
const PAR_WORK: usize = 1 << 16;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed sparse row matrix with `f64` weights, used for fixed linear
/// resampling maps (tangent patches to ERP grid).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from per-row `(column, weight)` lists.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        let mut col_idx = Vec::new();
        let mut weights = Vec::new();
        row_ptr.push(0);
        for row in &rows {
            for &(c, w) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                col_idx.push(c);
                weights.push(w);
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: rows.len(),
            cols,
            row_ptr,
            col_idx,
            weights,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// `y = M x` in `f64`.
    pub fn apply_f64(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).map(|(c, w)| w * x[c]).sum())
            .collect()
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddBias(Var, Var),
    MulRows(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Var },
    AvgPool { x: Var, k: usize },
    Upsample(Var),
    Concat(Vec<Var>),
    Embed { table: Var, ids: Vec<usize> },
    Sparse { x: Var, m: Arc<SparseMatrix> },
    Sum(Var),
    Mean(Var),
    Kld { pred: Var, target: Vec<f64> },
    Cc { pred: Var, target: Vec<f64> },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// A tape of operations recorded in execution order.
///
/// Node indices are a topological order, so `backward` is a single reverse
/// sweep that visits each node once.
pub struct Graph<S: Real = f32> {
    nodes: Vec<Node<S>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Trainable input; gradient is tracked.
    pub fn param(&mut self, t: Tensor<S>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<S>, inputs: &[Var], op: Op<S>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    fn data(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- forward

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("add", sa, sb);
        }
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push_op(t, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return shape_err("mul", sa, sb);
        }
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let t = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push_op(t, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push_op(t, &[a], Op::Scale(a, c))
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = *sx.last().unwrap();
        if sb != [c] {
            return shape_err("add_bias", sx, sb);
        }
        let bd = self.data(b);
        let data = self
            .data(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bd).map(|(&v, &bb)| v + bb))
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push_op(t, &[x, b], Op::AddBias(x, b)))
    }

    /// Scales row `r` of `x` (viewed as `[s.numel(), rest]`) by `s[r]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.shape(x), self.shape(s));
        let rows = self.value(s).numel();
        let n = self.value(x).numel();
        if n % rows != 0 || sx.iter().take(ss.len()).ne(ss.iter()) {
            return shape_err("mul_rows", sx, ss);
        }
        let k = n / rows;
        let sd = self.data(s);
        let data = self
            .data(x)
            .chunks(k)
            .zip(sd)
            .flat_map(|(row, &w)| row.iter().map(move |&v| v * w))
            .collect();
        let t = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push_op(t, &[x, s], Op::MulRows(x, s)))
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", &sa, &sb);
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(t, &[a, b], Op::MatMul(a, b)))
    }

    /// `(B, m, k) x (B, k, n) -> (B, m, n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return shape_err("bmm", &sa, &sb);
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bt * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(i, o)| gemm_nn(&ad[i * m * k..][..m * k], &bd[i * k * n..][..k * n], o, m, k, n));
        let t = Tensor::new(vec![bt, m, n], out)?;
        Ok(self.push_op(t, &[a, b], Op::Bmm(a, b)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if axes.len() != sx.len() || axes.iter().any(|&a| a >= sx.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err("permute", &sx, axes);
        }
        let (data, shape) = permute_data(self.data(x), &sx, axes);
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, &[x], Op::Permute(x, axes.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, &[x], Op::Reshape(x)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().unwrap();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut sum = 0.0f64;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += v.as_f64();
            }
            let inv = S::from_f64_lossy(1.0 / sum);
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out).expect("same shape");
        self.push_op(t, &[x], Op::Softmax(x))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("layer_norm", &sx, self.shape(gamma));
        }
        let rows = self.value(x).numel() / c;
        let mut xhat = vec![S::zero(); rows * c];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); rows * c];
        let (g, b) = (self.data(gamma), self.data(beta));
        for (r, row) in self.data(x).chunks(c).enumerate() {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = S::from_f64_lossy(rs);
            for j in 0..c {
                let h = S::from_f64_lossy((row[j].as_f64() - mean) * rs);
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(sx, out)?;
        Ok(self.push_op(
            t,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(S::zero())).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push_op(t, &[x], Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push_op(t, &[x], Op::Sigmoid(x))
    }

    /// 3x3 convolution, stride 1, zero padding 1, channel-last layout.
    ///
    /// `x: (N, H, W, Cin)`, `w: (3, 3, Cin, Cout)`, `b: (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != 3 || sw[1] != 3 || sw[2] != sx[3] {
            return shape_err("conv2d", &sx, &sw);
        }
        let co = sw[3];
        if self.shape(b) != [co] {
            return shape_err("conv2d", &sw, self.shape(b));
        }
        let (n, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (xd, wt, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![S::zero(); n * h * wd * co];
        let row = |(r, o): (usize, &mut [S])| {
            let (ni, y) = (r / h, r % h);
            for xx in 0..wd {
                let acc = &mut o[xx * co..][..co];
                acc.copy_from_slice(bd);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx_ = xx as isize + kx as isize - 1;
                        if sx_ < 0 || sx_ >= wd as isize {
                            continue;
                        }
                        let px = &xd[((ni * h + sy as usize) * wd + sx_ as usize) * ci..][..ci];
                        let wk = &wt[(ky * 3 + kx) * ci * co..][..ci * co];
                        for (c, &v) in px.iter().enumerate() {
                            axpy(acc, v, &wk[c * co..][..co]);
                        }
                    }
                }
            }
        };
        if n * h * wd * ci * co * 9 > PAR_WORK {
            out.par_chunks_mut(wd * co).enumerate().for_each(row);
        } else {
            out.chunks_mut(wd * co).enumerate().for_each(row);
        }
        let t = Tensor::new(vec![n, h, wd, co], out)?;
        Ok(self.push_op(t, &[x, w, b], Op::Conv2d { x, w, b }))
    }

    /// Non-overlapping `k x k` average pooling, channel-last layout.
    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || sx[1] % k != 0 || sx[2] % k != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2d",
                msg: format!("shape {sx:?} not divisible by kernel {k}"),
            });
        }
        let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / k, w / k);
        let xd = self.data(x);
        let mut out = vec![S::zero(); n * oh * ow * c];
        let inv = 1.0 / (k * k) as f64;
        for ni in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = &mut out[((ni * oh + oy) * ow + ox) * c..][..c];
                    for ch in 0..c {
                        let mut s = 0.0f64;
                        for dy in 0..k {
                            for dx in 0..k {
                                s += xd[((ni * h + oy * k + dy) * w + ox * k + dx) * c + ch].as_f64();
                            }
                        }
                        o[ch] = S::from_f64_lossy(s * inv);
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push_op(t, &[x], Op::AvgPool { x, k }))
    }

    /// Bilinear resize (half-pixel centers, edge clamped), channel-last layout.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || out_h == 0 || out_w == 0 {
            return shape_err("upsample_bilinear", &sx, &[out_h, out_w]);
        }
        let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
        let ys = resample_taps(h, out_h);
        let xs = resample_taps(w, out_w);
        let xd = self.data(x);
        let mut out = vec![S::zero(); n * out_h * out_w * c];
        for ni in 0..n {
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let o = &mut out[((ni * out_h + oy) * out_w + ox) * c..][..c];
                    for (tap_y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                        for (tap_x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                            let wgt = S::from_f64_lossy(wy * wx);
                            let src = &xd[((ni * h + tap_y) * w + tap_x) * c..][..c];
                            axpy(o, wgt, src);
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, out_h, out_w, c], out)?;
        Ok(self.push_op(t, &[x], Op::Upsample(x)))
    }

    /// Concatenation along the last (channel) axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return shape_err("concat", &first, s);
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &cw) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * cw..][..cw]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        Ok(self.push_op(t, xs, Op::Concat(xs.to_vec())))
    }

    /// Row gather: `table: (V, C)`, output `(ids.len(), C)`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 || ids.iter().any(|&i| i >= st[0]) || ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "embed",
                msg: format!("ids out of range for table {st:?}"),
            });
        }
        let c = st[1];
        let td = self.data(table);
        let out = ids.iter().flat_map(|&i| td[i * c..][..c].iter().copied()).collect();
        let t = Tensor::new(vec![ids.len(), c], out)?;
        Ok(self.push_op(
            t,
            &[table],
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `y = M · flatten(x)`, reshaped to `out_shape`.
    pub fn sparse_linear(&mut self, x: Var, m: Arc<SparseMatrix>, out_shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if n != m.cols() || out_shape.iter().product::<usize>() != m.rows() {
            return shape_err("sparse_linear", self.shape(x), &[m.rows(), m.cols()]);
        }
        let xd = self.data(x);
        let out = (0..m.rows())
            .map(|r| S::from_f64_lossy(m.row(r).map(|(c, w)| w * xd[c].as_f64()).sum()))
            .collect();
        let t = Tensor::new(out_shape.to_vec(), out)?;
        Ok(self.push_op(t, &[x], Op::Sparse { x, m }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push_op(Tensor::scalar(S::from_f64_lossy(s)), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.data(x).iter().map(|v| v.as_f64()).sum();
        self.push_op(Tensor::scalar(S::from_f64_lossy(s / n)), &[x], Op::Mean(x))
    }

    /// KL divergence `Σ Q ln(Q / (P + ε) + ε)` between sum-normalized
    /// `pred` (P) and constant `target` (Q).
    pub fn kld_loss(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        let (p, q) = self.loss_inputs("kld_loss", pred, target)?;
        let l: f64 = p
            .iter()
            .zip(&q)
            .map(|(&pi, &qi)| qi * (qi / (pi + KLD_EPS) + KLD_EPS).ln())
            .sum();
        Ok(self.push_op(
            Tensor::scalar(S::from_f64_lossy(l)),
            &[pred],
            Op::Kld { pred, target: q },
        ))
    }

    /// `1 - CC(pred, target)` with Pearson correlation over all elements.
    pub fn cc_loss(&mut self, pred: Var, target: &[f32]) -> Result<Var> {
        if self.value(pred).numel() != target.len() {
            return shape_err("cc_loss", self.shape(pred), &[target.len()]);
        }
        let p: Vec<f64> = self.data(pred).iter().map(|v| v.as_f64()).collect();
        let q: Vec<f64> = target.iter().map(|&v| v as f64).collect();
        let r = pearson(&p, &q).0;
        Ok(self.push_op(
            Tensor::scalar(S::from_f64_lossy(1.0 - r)),
            &[pred],
            Op::Cc { pred, target: q },
        ))
    }

    fn loss_inputs(&self, op: &'static str, pred: Var, target: &[f32]) -> Result<(Vec<f64>, Vec<f64>)> {
        if self.value(pred).numel() != target.len() {
            return shape_err(op, self.shape(pred), &[target.len()]);
        }
        let p = sum_normalize(self.data(pred).iter().map(|v| v.as_f64()).collect());
        let q = sum_normalize(target.iter().map(|&v| v as f64).collect());
        Ok((p, q))
    }

    // --------------------------------------------------------------- backward

    /// Populates gradients of every tracked node with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.node_backward(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                self.accumulate(v, cg);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<S>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            None => node.grad = Some(g),
        }
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    out.push((*a, zip_map(g, self.data(*b), |x, y| x * y)));
                }
                if self.tracked(*b) {
                    out.push((*b, zip_map(g, self.data(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&v| v * *c).collect())),
            Op::AddBias(x, b) => {
                out.push((*x, g.to_vec()));
                if self.tracked(*b) {
                    let c = self.value(*b).numel();
                    let mut gb = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v.as_f64());
                    }
                    out.push((*b, gb.into_iter().map(S::from_f64_lossy).collect()));
                }
            }
            Op::MulRows(x, s) => {
                let rows = self.value(*s).numel();
                let k = g.len() / rows;
                let sd = self.data(*s);
                if self.tracked(*x) {
                    let gx = g
                        .chunks(k)
                        .zip(sd)
                        .flat_map(|(row, &w)| row.iter().map(move |&v| v * w))
                        .collect();
                    out.push((*x, gx));
                }
                if self.tracked(*s) {
                    let gs = g
                        .chunks(k)
                        .zip(self.data(*x).chunks(k))
                        .map(|(gr, xr)| S::from_f64_lossy(dot_f64(gr, xr)))
                        .collect();
                    out.push((*s, gs));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.tracked(*a) {
                    let mut ga = vec![S::zero(); m * k];
                    gemm_nt(g, self.data(*b), &mut ga, m, n, k);
                    out.push((*a, ga));
                }
                if self.tracked(*b) {
                    let mut gb = vec![S::zero(); k * n];
                    gemm_tn(self.data(*a), g, &mut gb, m, k, n);
                    out.push((*b, gb));
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.tracked(*a) {
                    let mut ga = vec![S::zero(); bt * m * k];
                    ga.par_chunks_mut(m * k).enumerate().for_each(|(i, o)| {
                        gemm_nt(&g[i * m * n..][..m * n], &bd[i * k * n..][..k * n], o, m, n, k)
                    });
                    out.push((*a, ga));
                }
                if self.tracked(*b) {
                    let mut gb = vec![S::zero(); bt * k * n];
                    gb.par_chunks_mut(k * n).enumerate().for_each(|(i, o)| {
                        gemm_tn(&ad[i * m * k..][..m * k], &g[i * m * n..][..m * n], o, m, k, n)
                    });
                    out.push((*b, gb));
                }
            }
            Op::Permute(x, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (gx, _) = permute_data(g, node.value.shape(), &inv);
                out.push((*x, gx));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut gx = vec![S::zero(); g.len()];
                for ((gr, yr), or) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let d = S::from_f64_lossy(dot_f64(gr, yr));
                    for j in 0..c {
                        or[j] = yr[j] * (gr[j] - d);
                    }
                }
                out.push((*x, gx));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*gamma).numel();
                let gm = self.data(*gamma);
                if self.tracked(*x) {
                    let mut gx = vec![S::zero(); g.len()];
                    for (r, ((gr, hr), or)) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).enumerate() {
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..c {
                            let d = (gr[j] * gm[j]).as_f64();
                            s1 += d;
                            s2 += d * hr[j].as_f64();
                        }
                        let rs = rstd[r].as_f64();
                        for j in 0..c {
                            let d = (gr[j] * gm[j]).as_f64();
                            let v = rs * (d - s1 / c as f64 - hr[j].as_f64() * s2 / c as f64);
                            or[j] = S::from_f64_lossy(v);
                        }
                    }
                    out.push((*x, gx));
                }
                if self.tracked(*gamma) || self.tracked(*beta) {
                    let mut gg = vec![0.0f64; c];
                    let mut gbeta = vec![0.0f64; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += (gr[j] * hr[j]).as_f64();
                            gbeta[j] += gr[j].as_f64();
                        }
                    }
                    out.push((*gamma, gg.into_iter().map(S::from_f64_lossy).collect()));
                    out.push((*beta, gbeta.into_iter().map(S::from_f64_lossy).collect()));
                }
            }
            Op::Relu(x) => {
                let gx = zip_map(g, self.data(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() });
                out.push((*x, gx));
            }
            Op::Sigmoid(x) => {
                let gx = zip_map(g, node.value.data(), |gv, y| gv * y * (S::one() - y));
                out.push((*x, gx));
            }
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, g, &mut out),
            Op::AvgPool { x, k } => {
                let sx = self.shape(*x);
                let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = S::from_f64_lossy(1.0 / (k * k) as f64);
                let mut gx = vec![S::zero(); n * h * w * c];
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let src = &g[((ni * oh + y / k) * ow + xx / k) * c..][..c];
                            let dst = &mut gx[((ni * h + y) * w + xx) * c..][..c];
                            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s * inv);
                        }
                    }
                }
                out.push((*x, gx));
            }
            Op::Upsample(x) => {
                let sx = self.shape(*x);
                let (n, h, w, c) = (sx[0], sx[1], sx[2], sx[3]);
                let so = node.value.shape();
                let (out_h, out_w) = (so[1], so[2]);
                let ys = resample_taps(h, out_h);
                let xs = resample_taps(w, out_w);
                let mut gx = vec![S::zero(); n * h * w * c];
                gx.par_chunks_mut(h * w * c).enumerate().for_each(|(ni, gxn)| {
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let src = &g[((ni * out_h + oy) * out_w + ox) * c..][..c];
                            for (tap_y, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                                for (tap_x, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                                    let wgt = S::from_f64_lossy(wy * wx);
                                    axpy(&mut gxn[(tap_y * w + tap_x) * c..][..c], wgt, src);
                                }
                            }
                        }
                    }
                });
                out.push((*x, gx));
            }
            Op::Concat(xs) => {
                let widths: Vec<usize> = xs.iter().map(|&v| *self.shape(v).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&v, &cw) in xs.iter().zip(&widths) {
                    if self.tracked(v) {
                        let gv = (0..rows)
                            .flat_map(|r| g[r * total + offset..][..cw].iter().copied())
                            .collect();
                        out.push((v, gv));
                    }
                    offset += cw;
                }
            }
            Op::Embed { table, ids } => {
                let st = self.shape(*table);
                let c = st[1];
                let mut gt = vec![S::zero(); st[0] * c];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * c..][..c];
                    dst.iter_mut().zip(&g[r * c..][..c]).for_each(|(d, &s)| *d = *d + s);
                }
                out.push((*table, gt));
            }
            Op::Sparse { x, m } => {
                let mut gx = vec![0.0f64; m.cols()];
                for (r, gv) in g.iter().enumerate() {
                    let gv = gv.as_f64();
                    for (c, w) in m.row(r) {
                        gx[c] += w * gv;
                    }
                }
                out.push((*x, gx.into_iter().map(S::from_f64_lossy).collect()));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).numel()])),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                out.push((*x, vec![g[0] / S::from_usize(n).unwrap(); n]));
            }
            Op::Kld { pred, target } => {
                let raw: Vec<f64> = self.data(*pred).iter().map(|v| v.as_f64()).collect();
                let total = raw.iter().sum::<f64>();
                let s = guard_sum(total);
                let p: Vec<f64> = raw.iter().map(|v| v / s).collect();
                // dL/dP_i, then chain through P = x / Σx.
                let dp: Vec<f64> = p
                    .iter()
                    .zip(target)
                    .map(|(&pi, &qi)| {
                        let d = pi + KLD_EPS;
                        -qi * qi / (d * d) / (qi / d + KLD_EPS)
                    })
                    .collect();
                let dot: f64 = dp.iter().zip(&p).map(|(a, b)| a * b).sum();
                let scale = g[0].as_f64();
                let gx = dp
                    .iter()
                    .map(|&d| S::from_f64_lossy(scale * (d - dot) / s))
                    .collect();
                out.push((*pred, gx));
            }
            Op::Cc { pred, target } => {
                let p: Vec<f64> = self.data(*pred).iter().map(|v| v.as_f64()).collect();
                let (r, pc, qc) = pearson(&p, target);
                let sp: f64 = pc.iter().map(|v| v * v).sum();
                let sq: f64 = qc.iter().map(|v| v * v).sum();
                let scale = g[0].as_f64();
                let gx = if sp <= 0.0 || sq <= 0.0 {
                    vec![S::zero(); p.len()]
                } else {
                    let norm = (sp * sq).sqrt();
                    pc.iter()
                        .zip(&qc)
                        .map(|(&a, &b)| S::from_f64_lossy(-scale * (b / norm - r * a / sp)))
                        .collect()
                };
                out.push((*pred, gx));
            }
        }
        out
    }

    fn conv2d_backward(&self, x: Var, w: Var, b: Var, g: &[S], out: &mut Vec<(Var, Vec<S>)>) {
        let sx = self.shape(x);
        let (n, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let co = self.shape(w)[3];
        let (xd, wt) = (self.data(x), self.data(w));
        let big = n * h * wd * ci * co * 9 > PAR_WORK;
        if self.tracked(x) {
            let mut gx = vec![S::zero(); n * h * wd * ci];
            let row = |(r, o): (usize, &mut [S])| {
                let (ni, y) = (r / h, r % h);
                for xx in 0..wd {
                    let acc = &mut o[xx * ci..][..ci];
                    for ky in 0..3 {
                        // output row that reads input row y through tap ky
                        let oy = y as isize + 1 - ky as isize;
                        if oy < 0 || oy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ox = xx as isize + 1 - kx as isize;
                            if ox < 0 || ox >= wd as isize {
                                continue;
                            }
                            let gy = &g[((ni * h + oy as usize) * wd + ox as usize) * co..][..co];
                            let wk = &wt[(ky * 3 + kx) * ci * co..][..ci * co];
                            for (c, a) in acc.iter_mut().enumerate() {
                                *a = *a + dot(&wk[c * co..][..co], gy);
                            }
                        }
                    }
                }
            };
            if big {
                gx.par_chunks_mut(wd * ci).enumerate().for_each(row);
            } else {
                gx.chunks_mut(wd * ci).enumerate().for_each(row);
            }
            out.push((x, gx));
        }
        if self.tracked(w) {
            let mut gw = vec![S::zero(); 9 * ci * co];
            let row = |(r, o): (usize, &mut [S])| {
                let (tap, c) = (r / ci, r % ci);
                let (ky, kx) = (tap / 3, tap % 3);
                let mut acc = vec![0.0f64; co];
                for ni in 0..n {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..wd {
                            let sx_ = xx as isize + kx as isize - 1;
                            if sx_ < 0 || sx_ >= wd as isize {
                                continue;
                            }
                            let v = xd[((ni * h + sy as usize) * wd + sx_ as usize) * ci + c].as_f64();
                            if v == 0.0 {
                                continue;
                            }
                            let gy = &g[((ni * h + y) * wd + xx) * co..][..co];
                            acc.iter_mut().zip(gy).for_each(|(a, &gv)| *a += v * gv.as_f64());
                        }
                    }
                }
                o.iter_mut().zip(acc).for_each(|(d, a)| *d = S::from_f64_lossy(a));
            };
            if big {
                gw.par_chunks_mut(co).enumerate().for_each(row);
            } else {
                gw.chunks_mut(co).enumerate().for_each(row);
            }
            out.push((w, gw));
        }
        if self.tracked(b) {
            let mut gb = vec![0.0f64; co];
            for row in g.chunks(co) {
                gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v.as_f64());
            }
            out.push((b, gb.into_iter().map(S::from_f64_lossy).collect()));
        }
    }
}

// ------------------------------------------------------------------ kernels

pub(crate) fn sigmoid<S: Real>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

fn zip_map<S: Real>(a: &[S], b: &[S], f: impl Fn(S, S) -> S) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn axpy<S: Real>(y: &mut [S], a: S, x: &[S]) {
    y.iter_mut().zip(x).for_each(|(yv, &xv)| *yv = *yv + a * xv);
}

#[inline]
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

fn dot_f64<S: Real>(a: &[S], b: &[S]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum()
}

/// `c (m,n) = a (m,k) · b (k,n)`.
fn gemm_nn<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |(i, ci): (usize, &mut [S])| {
        ci.iter_mut().for_each(|v| *v = S::zero());
        for p in 0..k {
            let av = a[i * k + p];
            if av != S::zero() {
                axpy(ci, av, &b[p * n..][..n]);
            }
        }
    };
    if m * k * n > PAR_WORK {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `c (m,k) = a (m,n) · b (k,n)ᵀ`.
fn gemm_nt<S: Real>(a: &[S], b: &[S], c: &mut [S], m: usize, n: usize, k: usize) {
    let row = |(i, ci): (usize, &mut [S])| {
        let ar = &a[i * n..][..n];
        for (p, v) in ci.iter_mut().enumerate() {
            *v = dot(ar, &b[p * n..][..n]);
        }
    };
    if m * k * n > PAR_WORK {
        c.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        c.chunks_mut(k).enumerate().for_each(row);
    }
}

/// `c (k,n) = a (m,k)ᵀ · g (m,n)`.
fn gemm_tn<S: Real>(a: &[S], g: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    let row = |(p, cp): (usize, &mut [S])| {
        cp.iter_mut().for_each(|v| *v = S::zero());
        for i in 0..m {
            let av = a[i * k + p];
            if av != S::zero() {
                axpy(cp, av, &g[i * n..][..n]);
            }
        }
    };
    if m * k * n > PAR_WORK {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

fn permute_data<S: Real>(data: &[S], shape: &[usize], axes: &[usize]) -> (Vec<S>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Source taps `(lo, hi, frac)` for a half-pixel-centered bilinear resize.
pub(crate) fn resample_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn guard_sum(s: f64) -> f64 {
    if s > f64::MIN_POSITIVE {
        s
    } else {
        f64::MIN_POSITIVE
    }
}

fn sum_normalize(mut v: Vec<f64>) -> Vec<f64> {
    let s = guard_sum(v.iter().sum());
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Pearson correlation and the centered inputs.
fn pearson(p: &[f64], q: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mq = q.iter().sum::<f64>() / n;
    let pc: Vec<f64> = p.iter().map(|v| v - mp).collect();
    let qc: Vec<f64> = q.iter().map(|v| v - mq).collect();
    let a: f64 = pc.iter().zip(&qc).map(|(x, y)| x * y).sum();
    let sp: f64 = pc.iter().map(|v| v * v).sum();
    let sq: f64 = qc.iter().map(|v| v * v).sum();
    let r = if sp > 0.0 && sq > 0.0 { a / (sp * sq).sqrt() } else { 0.0 };
    (r, pc, qc)
}

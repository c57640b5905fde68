//! Tape-based reverse-mode automatic differentiation.
//!
//! Every differentiable operation appends a node to a [`Tape`]; nodes only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and backward is a single reverse sweep. A tape is owned by
//! one thread; independent tapes may run concurrently.

mod kernels;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{gemm, ConvGeometry, Layout};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Disjoint, non-empty index groups covering `0..len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Groups {
    groups: Vec<Vec<usize>>,
    len: usize,
}

impl Groups {
    pub fn new(groups: Vec<Vec<usize>>) -> Result<Self> {
        let len: usize = groups.iter().map(Vec::len).sum();
        let mut seen = vec![false; len];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Structure("empty softmax group".into()));
            }
            for &i in g {
                if i >= len || seen[i] {
                    return Err(Error::Structure(format!(
                        "groups do not partition 0..{len}: index {i}"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(Groups { groups, len })
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> {
        self.groups.iter().map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn count(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Dropout(Var, Vec<f64>),
    MatMul(Var, Var),
    Conv2d {
        image: Var,
        kernels: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    AddBias(Var, Var),
    SpatialMean(Var),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    ScaleRows(Var, Var),
    SegmentSum(Var, Vec<usize>),
    /// Input, argmax rows, smallest non-zero best-vs-runner-up gap.
    SegmentMax(Var, Vec<usize>, f64),
    SoftmaxGroups(Var, Groups),
    RowDistSq(Var, Var),
    ClampMin0(Var),
    ClampMax0(Var),
    Abs(Var),
    MaskRows(Var, Vec<bool>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Dropout(..) => "dropout",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias(..) => "add_bias",
            Op::SpatialMean(..) => "spatial_mean",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ScaleRows(..) => "scale_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::SegmentMax(..) => "segment_max",
            Op::SoftmaxGroups(..) => "softmax_over_groups",
            Op::RowDistSq(..) => "row_distance_sq",
            Op::ClampMin0(..) => "clamp_min0",
            Op::ClampMax0(..) => "clamp_max0",
            Op::Abs(..) => "abs",
            Op::MaskRows(..) => "mask_rows",
            Op::Reshape(..) => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Counters from one backward sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes on the tape when backward ran.
    pub recorded: usize,
    /// Nodes whose backward rule executed; each at most once.
    pub visited: usize,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last backward sweep, if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value shape"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let values = t.values().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), values)?;
        self.push(out, op, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let name = op.name();
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    /// Elementwise `max(x, slope·x)` for `slope` in (0, 1).
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_relu slope must lie in (0,1), got {slope}"
            )));
        }
        self.map(x, Op::LeakyRelu(x, slope), |v| if v > 0.0 { v } else { slope * v })
    }

    /// Inverted dropout. In eval mode, or with `rate == 0`, returns `x` itself.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0,1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let t = self.value(x);
        let values = t.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), values)?;
        self.push(out, Op::Dropout(x, mask), &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k) = ta.dims2()?;
        let (k2, c) = tb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; r * c];
        gemm(
            r,
            k,
            c,
            ta.values(),
            Layout::row_major(k),
            tb.values(),
            Layout::row_major(c),
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![r, c], out)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Valid cross-correlation of `[h,w,c]` (or batched `[b,h,w,c]`) input with
    /// `[k,k,c,f]` kernels. Output is `[oh,ow,f]` (or `[b,oh,ow,f]`).
    pub fn conv2d(&mut self, image: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (ti, tk) = (self.value(image), self.value(kernels));
        let (batch, h, w, c, batched) = match ti.shape() {
            &[h, w, c] => (1, h, w, c, false),
            &[b, h, w, c] => (b, h, w, c, true),
            other => return Err(Error::shape("conv2d", other, tk.shape())),
        };
        let (k, f) = match tk.shape() {
            &[k1, k2, kc, f] if k1 == k2 && kc == c => (k1, f),
            other => return Err(Error::shape("conv2d", ti.shape(), other)),
        };
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        if k > h || k > w {
            return Err(Error::shape("conv2d", ti.shape(), tk.shape()));
        }
        let geom = ConvGeometry {
            batch,
            h,
            w,
            c,
            k,
            f,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        };
        let cols = geom.im2col(ti.values());
        let mut out = vec![0.0; geom.out_positions() * f];
        gemm(
            geom.out_positions(),
            geom.patch_len(),
            f,
            &cols,
            Layout::row_major(geom.patch_len()),
            tk.values(),
            Layout::row_major(f),
            0.0,
            &mut out,
        );
        let shape = if batched {
            vec![batch, geom.oh, geom.ow, f]
        } else {
            vec![geom.oh, geom.ow, f]
        };
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Conv2d {
                image,
                kernels,
                geom,
                cols,
            },
            &[image, kernels],
        )
    }

    /// Adds a `[f]` bias along the trailing axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let f = *tx.shape().last().expect("rank ≥ 1");
        if tb.len() != f {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let b = tb.values();
        let values = tx
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % f])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), values)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    /// Mean over the spatial axes of `[b,h,w,f]` (or `[h,w,f]`), giving `[b,f]` (or `[1,f]`).
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, hw, f) = match tx.shape() {
            &[h, w, f] => (1, h * w, f),
            &[b, h, w, f] => (b, h * w, f),
            other => return Err(Error::shape("spatial_mean", other, &[0, 0, 0, 0])),
        };
        let mut out = vec![0.0; b * f];
        for bi in 0..b {
            let o = &mut out[bi * f..(bi + 1) * f];
            for p in 0..hw {
                let row = &tx.values()[(bi * hw + p) * f..(bi * hw + p + 1) * f];
                for (acc, v) in o.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for acc in o.iter_mut() {
                *acc /= hw as f64;
            }
        }
        let out = Tensor::new(vec![b, f], out)?;
        self.push(out, Op::SpatialMean(x), &[x])
    }

    /// Column means of an `[n,d]` matrix as a `[1,d]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = tx.dims2()?;
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (acc, v) in out.iter_mut().zip(tx.row(i)) {
                *acc += v;
            }
        }
        for acc in out.iter_mut() {
            *acc /= n as f64;
        }
        let out = Tensor::new(vec![1, d], out)?;
        self.push(out, Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.values().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Output row `e` is input row `index[e]`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 1 || index.is_empty() {
            return Err(Error::Structure("gather_rows needs a non-empty index".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::shape("gather_rows", tx.shape(), &[bad]));
        }
        let out = tx.select_rows(&index);
        self.push(out, Op::GatherRows(x, index), &[x])
    }

    /// Row-wise concatenation `[a_i ⊕ b_i]` of two `[n, ·]` matrices.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, ca) = ta.dims2()?;
        let (nb, cb) = tb.dims2()?;
        if n != nb {
            return Err(Error::shape("concat_cols", ta.shape(), tb.shape()));
        }
        let mut values = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            values.extend_from_slice(ta.row(i));
            values.extend_from_slice(tb.row(i));
        }
        let out = Tensor::new(vec![n, ca + cb], values)?;
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Multiplies row `e` of `[n,d]` by `w[e]` where `w` holds `n` values.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (n, d) = tx.dims2()?;
        if tw.len() != n {
            return Err(Error::shape("scale_rows", tx.shape(), tw.shape()));
        }
        let mut values = tx.values().to_vec();
        for (i, s) in tw.values().iter().enumerate() {
            for v in &mut values[i * d..(i + 1) * d] {
                *v *= s;
            }
        }
        let out = Tensor::new(vec![n, d], values)?;
        self.push(out, Op::ScaleRows(x, w), &[x, w])
    }

    /// Sums rows of `[e,d]` into `segments` output rows by `segment_of[e]`.
    pub fn segment_sum(&mut self, x: Var, segment_of: Vec<usize>, segments: usize) -> Result<Var> {
        let tx = self.value(x);
        let (e, d) = tx.dims2()?;
        if segment_of.len() != e || segments == 0 {
            return Err(Error::shape("segment_sum", tx.shape(), &[segment_of.len()]));
        }
        let mut out = vec![0.0; segments * d];
        for (row, &s) in segment_of.iter().enumerate() {
            if s >= segments {
                return Err(Error::Structure(format!("segment id {s} ≥ {segments}")));
            }
            for (acc, v) in out[s * d..(s + 1) * d].iter_mut().zip(tx.row(row)) {
                *acc += v;
            }
        }
        let out = Tensor::new(vec![segments, d], out)?;
        self.push(out, Op::SegmentSum(x, segment_of), &[x])
    }

    /// Elementwise max over each group of rows of `[e,d]`; one output row per group.
    /// Ties resolve to the earliest row listed in the group.
    pub fn segment_max(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let tx = self.value(x);
        let (e, d) = tx.dims2()?;
        if groups.is_empty() {
            return Err(Error::Structure("segment_max needs at least one group".into()));
        }
        let mut out = vec![0.0; groups.len() * d];
        let mut argmax = vec![0usize; groups.len() * d];
        let mut gap = f64::INFINITY;
        for (gi, g) in groups.iter().enumerate() {
            let Some(&first) = g.first() else {
                return Err(Error::Structure(format!("segment_max group {gi} is empty")));
            };
            if let Some(&bad) = g.iter().find(|&&r| r >= e) {
                return Err(Error::shape("segment_max", tx.shape(), &[bad]));
            }
            for k in 0..d {
                let mut best = first;
                for &r in &g[1..] {
                    if tx.get2(r, k) > tx.get2(best, k) {
                        best = r;
                    }
                }
                for &r in g {
                    let diff = tx.get2(best, k) - tx.get2(r, k);
                    if diff > 0.0 {
                        gap = gap.min(diff);
                    }
                }
                out[gi * d + k] = tx.get2(best, k);
                argmax[gi * d + k] = best;
            }
        }
        let out = Tensor::new(vec![groups.len(), d], out)?;
        self.push(out, Op::SegmentMax(x, argmax, gap), &[x])
    }

    /// Softmax within each group of a flat score vector, max-subtracted.
    pub fn softmax_over_groups(&mut self, scores: Var, groups: Groups) -> Result<Var> {
        let ts = self.value(scores);
        if groups.len() != ts.len() {
            return Err(Error::shape("softmax_over_groups", ts.shape(), &[groups.len()]));
        }
        let s = ts.values();
        let mut out = vec![0.0; s.len()];
        for g in groups.iter() {
            let max = g.iter().map(|&i| s[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &i in g {
                out[i] = (s[i] - max).exp();
                total += out[i];
            }
            for &i in g {
                out[i] /= total;
            }
        }
        let out = Tensor::new(ts.shape().to_vec(), out)?;
        self.push(out, Op::SoftmaxGroups(scores, groups), &[scores])
    }

    /// Per-row squared Euclidean distance of two `[n,d]` matrices, shape `[n]`.
    pub fn row_distance_sq(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_distance_sq", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, _) = ta.dims2()?;
        let values = (0..n)
            .map(|i| {
                ta.row(i)
                    .iter()
                    .zip(tb.row(i))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum()
            })
            .collect();
        let out = Tensor::new(vec![n], values)?;
        self.push(out, Op::RowDistSq(a, b), &[a, b])
    }

    /// `max(x, 0)`; subgradient 0 at the kink.
    pub fn clamp_min0(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::ClampMin0(x), |v| v.max(0.0))
    }

    /// `min(x, 0)`; subgradient 0 at the kink.
    pub fn clamp_max0(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::ClampMax0(x), |v| v.min(0.0))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Abs(x), f64::abs)
    }

    /// Zeroes the rows flagged in `masked`; other rows pass through bit-exactly.
    pub fn mask_rows(&mut self, x: Var, masked: Vec<bool>) -> Result<Var> {
        let tx = self.value(x);
        if masked.len() != tx.rows() {
            return Err(Error::shape("mask_rows", tx.shape(), &[masked.len()]));
        }
        let mut out = tx.clone();
        for (i, &m) in masked.iter().enumerate() {
            if m {
                out.row_mut(i).fill(0.0);
            }
        }
        self.push(out, Op::MaskRows(x, masked), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Smallest distance of any input of a piecewise-linear op from its
    /// kink, over gradient-carrying nodes. Exact zeros and exact ties are
    /// skipped: they only arise from entries that no input can move.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::LeakyRelu(x, _) | Op::ClampMin0(x) | Op::ClampMax0(x) | Op::Abs(x) => {
                    for &v in self.value(*x).values() {
                        if v != 0.0 {
                            margin = margin.min(v.abs());
                        }
                    }
                }
                Op::SegmentMax(_, _, gap) => margin = margin.min(*gap),
                _ => {}
            }
        }
        margin
    }

    /// Which linear piece every piecewise-linear op is on: input signs and
    /// argmax rows. Two evaluations with equal signatures lie on the same
    /// smooth branch.
    pub fn branch_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::LeakyRelu(x, _) | Op::ClampMin0(x) | Op::ClampMax0(x) | Op::Abs(x) => {
                    sig.extend(self.value(*x).values().iter().map(|v| match v.partial_cmp(&0.0) {
                        Some(std::cmp::Ordering::Greater) => 2,
                        Some(std::cmp::Ordering::Less) => 0,
                        _ => 1,
                    }));
                }
                Op::SegmentMax(_, argmax, _) => sig.extend(argmax.iter().map(|&r| r as u64)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `root`. Gradients of earlier sweeps are discarded.
    pub fn backward(&mut self, root: Var) -> Result<BackwardStats> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        let mut stats = BackwardStats {
            recorded: self.nodes.len(),
            visited: 0,
        };
        if !self.nodes[root.0].requires_grad {
            return Ok(stats);
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            stats.visited += 1;
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(stats)
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        let val = |v: Var| nodes[v.0].value.values();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc!(*a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc!(*b) {
                    for (o, x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc!(*a) {
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc!(*x) {
                    for (o, v) in gx.iter_mut().zip(g) {
                        *o += c * v;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
            }
            Op::LeakyRelu(x, slope) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        *o += if *xv > 0.0 { *gv } else { slope * gv };
                    }
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (r, k) = nodes[a.0].value.dims2().expect("matmul lhs");
                let c = nodes[b.0].value.shape()[1];
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = acc!(*a) {
                    // dA = G·Bᵀ
                    gemm(
                        r,
                        c,
                        k,
                        g,
                        Layout::row_major(c),
                        bv,
                        Layout::transposed(c),
                        1.0,
                        ga,
                    );
                }
                if let Some(gb) = acc!(*b) {
                    // dB = Aᵀ·G
                    gemm(
                        k,
                        r,
                        c,
                        av,
                        Layout::transposed(k),
                        g,
                        Layout::row_major(c),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Conv2d {
                image,
                kernels,
                geom,
                cols,
            } => {
                let (p, l, f) = (geom.out_positions(), geom.patch_len(), geom.f);
                if let Some(gk) = acc!(*kernels) {
                    gemm(
                        l,
                        p,
                        f,
                        cols,
                        Layout::transposed(l),
                        g,
                        Layout::row_major(f),
                        1.0,
                        gk,
                    );
                }
                let kv = val(*kernels);
                if let Some(gi) = acc!(*image) {
                    let mut dcols = vec![0.0; p * l];
                    gemm(
                        p,
                        f,
                        l,
                        g,
                        Layout::row_major(f),
                        kv,
                        Layout::transposed(f),
                        0.0,
                        &mut dcols,
                    );
                    geom.col2im_add(&dcols, gi);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = acc!(*x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc!(*b) {
                    let f = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % f] += v;
                    }
                }
            }
            Op::SpatialMean(x) => {
                let shape = nodes[x.0].value.shape();
                let f = shape[shape.len() - 1];
                let hw = shape[shape.len() - 3] * shape[shape.len() - 2];
                if let Some(gx) = acc!(*x) {
                    for (idx, o) in gx.iter_mut().enumerate() {
                        let b = idx / (hw * f);
                        *o += g[b * f + idx % f] / hw as f64;
                    }
                }
            }
            Op::MeanRows(x) => {
                let (n, d) = nodes[x.0].value.dims2().expect("mean_rows input");
                if let Some(gx) = acc!(*x) {
                    for (idx, o) in gx.iter_mut().enumerate() {
                        *o += g[idx % d] / n as f64;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc!(*x) {
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc!(*x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|o| *o += g[0] / n);
                }
            }
            Op::GatherRows(x, index) => {
                let d = nodes[x.0].value.cols();
                if let Some(gx) = acc!(*x) {
                    for (e, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * d..(src + 1) * d], &g[e * d..(e + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = nodes[a.0].value.cols();
                let cb = nodes[b.0].value.cols();
                let n = nodes[a.0].value.rows();
                let w = ca + cb;
                if let Some(ga) = acc!(*a) {
                    for i in 0..n {
                        add_into(&mut ga[i * ca..(i + 1) * ca], &g[i * w..i * w + ca]);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..n {
                        add_into(&mut gb[i * cb..(i + 1) * cb], &g[i * w + ca..(i + 1) * w]);
                    }
                }
            }
            Op::ScaleRows(x, w) => {
                let d = nodes[x.0].value.cols();
                let (xv, wv) = (val(*x), val(*w));
                if let Some(gx) = acc!(*x) {
                    for (idx, o) in gx.iter_mut().enumerate() {
                        *o += g[idx] * wv[idx / d];
                    }
                }
                if let Some(gw) = acc!(*w) {
                    for (i, o) in gw.iter_mut().enumerate() {
                        *o += g[i * d..(i + 1) * d]
                            .iter()
                            .zip(&xv[i * d..(i + 1) * d])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    }
                }
            }
            Op::SegmentSum(x, segment_of) => {
                let d = nodes[x.0].value.cols();
                if let Some(gx) = acc!(*x) {
                    for (row, &s) in segment_of.iter().enumerate() {
                        add_into(&mut gx[row * d..(row + 1) * d], &g[s * d..(s + 1) * d]);
                    }
                }
            }
            Op::SegmentMax(x, argmax, _) => {
                let d = nodes[x.0].value.cols();
                if let Some(gx) = acc!(*x) {
                    for (idx, &src) in argmax.iter().enumerate() {
                        gx[src * d + idx % d] += g[idx];
                    }
                }
            }
            Op::SoftmaxGroups(s, groups) => {
                let y = node.value.values();
                if let Some(gs) = acc!(*s) {
                    for grp in groups.iter() {
                        let dot: f64 = grp.iter().map(|&i| g[i] * y[i]).sum();
                        for &i in grp {
                            gs[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            }
            Op::RowDistSq(a, b) => {
                let d = nodes[a.0].value.cols();
                let (av, bv) = (val(*a), val(*b));
                let diff = |idx: usize| 2.0 * (av[idx] - bv[idx]) * g[idx / d];
                if let Some(ga) = acc!(*a) {
                    for (idx, o) in ga.iter_mut().enumerate() {
                        *o += diff(idx);
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for (idx, o) in gb.iter_mut().enumerate() {
                        *o -= diff(idx);
                    }
                }
            }
            Op::ClampMin0(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ClampMax0(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv < 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Abs(x) => {
                if let Some(gx) = acc!(*x) {
                    for ((o, gv), xv) in gx.iter_mut().zip(g).zip(val(*x)) {
                        if *xv > 0.0 {
                            *o += gv;
                        } else if *xv < 0.0 {
                            *o -= gv;
                        }
                    }
                }
            }
            Op::MaskRows(x, masked) => {
                let d = nodes[x.0].value.cols();
                if let Some(gx) = acc!(*x) {
                    for (i, &m) in masked.iter().enumerate() {
                        if !m {
                            add_into(&mut gx[i * d..(i + 1) * d], &g[i * d..(i + 1) * d]);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

//! A small reverse-mode autodiff tape over dense row-major `f64` matrices.
//!
//! Every value is an `Array2<f64>`. Image batches are stored flattened as
//! `[batch, channels * height * width]` (channel-major within a row) and the
//! spatial ops carry their geometry explicitly. Loss functions are not traced
//! op-by-op: they are evaluated by pure kernels that return their own
//! analytic gradients, which are attached to the tape as a single node.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::params::ParamId;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// How a batch-norm input is laid out in its row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnLayout {
    /// `[batch, features]`; one statistic per column.
    Dense,
    /// `[batch, channels * spatial]`; one statistic per channel.
    Spatial { channels: usize, spatial: usize },
}

impl BnLayout {
    fn channels(&self, cols: usize) -> usize {
        match *self {
            BnLayout::Dense => cols,
            BnLayout::Spatial { channels, .. } => channels,
        }
    }
    fn spatial(&self) -> usize {
        match *self {
            BnLayout::Dense => 1,
            BnLayout::Spatial { spatial, .. } => spatial,
        }
    }
}

/// Statistics source for a batch-norm forward.
#[derive(Debug, Clone, Copy)]
pub enum BnStats<'a> {
    /// Training mode: normalise with the batch's own statistics.
    Batch { eps: f64 },
    /// Inference mode: normalise with stored running statistics.
    Running {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Geometry of a 2-D convolution without bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }
    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layout: BnLayout,
        xhat: Mat,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(NodeId),
    Add(NodeId, NodeId),
    AvgPool {
        x: NodeId,
        channels: usize,
        spatial: usize,
    },
    Concat(Vec<NodeId>),
    Slice {
        x: NodeId,
        rows: Range<usize>,
    },
    Gather {
        x: NodeId,
        rows: Vec<usize>,
    },
    Loss(Vec<(NodeId, Mat)>),
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a scalar root with respect to every tracked parameter.
#[derive(Debug, Default, Clone)]
pub struct Grads {
    map: BTreeMap<ParamId, Mat>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.map.get(&id)
    }
    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Mat)> {
        self.map.iter()
    }
    pub fn len(&self) -> usize {
        self.map.len()
    }
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// A constant input; gradients never flow into it.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A parameter leaf. Untracked parameters behave like constants.
    pub fn param(&mut self, id: ParamId, value: Mat, track: bool) -> NodeId {
        let node = self.push(value, Op::Leaf, track);
        if track {
            self.nodes[node.0].param = Some(id);
        }
        node
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input width mismatch");
        let mut y = xv.dot(&wv.t());
        if let Some(b) = b {
            let bv = self.value(b);
            y += &bv.row(0);
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        self.push(y, Op::Linear { x, w, b }, rg)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, geom: ConvGeom) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ncols(), geom.in_len(), "conv2d: input geometry mismatch");
        assert_eq!(
            wv.dim(),
            (geom.out_channels, geom.patch_len()),
            "conv2d: weight geometry mismatch"
        );
        let batch = xv.nrows();
        let plane = geom.out_h() * geom.out_w();
        let mut y = Mat::zeros((batch, geom.out_len()));
        let mut cols = Mat::zeros((geom.patch_len(), plane));
        for b in 0..batch {
            im2col(xv.row(b).as_slice().expect("contiguous"), &geom, &mut cols);
            let out = wv.dot(&cols);
            y.row_mut(b)
                .as_slice_mut()
                .expect("contiguous")
                .copy_from_slice(out.as_slice().expect("contiguous"));
        }
        let rg = self.any_grad(&[x, w]);
        self.push(y, Op::Conv2d { x, w, geom }, rg)
    }

    /// Batch normalisation. In `Batch` mode also returns the batch mean and
    /// unbiased variance per channel so callers can update running stats.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        layout: BnLayout,
        stats: BnStats<'_>,
    ) -> (NodeId, Option<(Vec<f64>, Vec<f64>)>) {
        let xv = self.value(x);
        let cols = xv.ncols();
        let channels = layout.channels(cols);
        let spatial = layout.spatial();
        assert_eq!(channels * spatial, cols, "batch_norm: layout mismatch");
        let gv = self.value(gamma).row(0).to_vec();
        let bv = self.value(beta).row(0).to_vec();
        let n = (xv.nrows() * spatial) as f64;

        let (mean, var, eps, batch_stats) = match stats {
            BnStats::Batch { eps } => {
                let mut mean = vec![0.0; channels];
                let mut var = vec![0.0; channels];
                for row in xv.rows() {
                    for (j, v) in row.iter().enumerate() {
                        mean[j / spatial] += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                for row in xv.rows() {
                    for (j, v) in row.iter().enumerate() {
                        let d = v - mean[j / spatial];
                        var[j / spatial] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n);
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => (mean.to_vec(), var.to_vec(), eps, false),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        let mut y = xv.clone();
        Zip::from(xhat.rows_mut())
            .and(y.rows_mut())
            .for_each(|mut xh, mut yr| {
                for j in 0..cols {
                    let c = j / spatial;
                    let h = (xh[j] - mean[c]) * inv_std[c];
                    xh[j] = h;
                    yr[j] = gv[c] * h + bv[c];
                }
            });
        let running = if batch_stats {
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            Some((mean, var.iter().map(|v| v * unbias).collect()))
        } else {
            None
        };
        let rg = self.any_grad(&[x, gamma, beta]);
        let id = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        );
        (id, running)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a) + self.value(b);
        let rg = self.any_grad(&[a, b]);
        self.push(y, Op::Add(a, b), rg)
    }

    /// Global average pooling from `[B, C*S]` to `[B, C]`.
    pub fn avg_pool(&mut self, x: NodeId, channels: usize, spatial: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(
            xv.ncols(),
            channels * spatial,
            "avg_pool: geometry mismatch"
        );
        let mut y = Mat::zeros((xv.nrows(), channels));
        for (b, row) in xv.rows().into_iter().enumerate() {
            for c in 0..channels {
                y[[b, c]] = row.slice(s![c * spatial..(c + 1) * spatial]).sum() / spatial as f64;
            }
        }
        let rg = self.any_grad(&[x]);
        self.push(
            y,
            Op::AvgPool {
                x,
                channels,
                spatial,
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows: no inputs");
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let y = ndarray::concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        let rg = self.any_grad(parts);
        self.push(y, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: NodeId, rows: Range<usize>) -> NodeId {
        let y = self.value(x).slice(s![rows.clone(), ..]).to_owned();
        let rg = self.any_grad(&[x]);
        self.push(y, Op::Slice { x, rows }, rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let y = self.value(x).select(Axis(0), rows);
        let rg = self.any_grad(&[x]);
        self.push(
            y,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Attach a scalar computed outside the tape together with its
    /// gradients with respect to `inputs`.
    pub fn loss(&mut self, value: f64, inputs: Vec<(NodeId, Mat)>) -> NodeId {
        for (id, g) in &inputs {
            assert_eq!(
                self.value(*id).dim(),
                g.dim(),
                "loss: gradient shape does not match its input"
            );
        }
        let ids: Vec<NodeId> = inputs.iter().map(|(i, _)| *i).collect();
        let rg = self.any_grad(&ids);
        self.push(Mat::from_elem((1, 1), value), Op::Loss(inputs), rg)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let total: f64 = terms.iter().map(|(id, w)| w * self.scalar(*id)).sum();
        let ids: Vec<NodeId> = terms.iter().map(|(i, _)| *i).collect();
        let rg = self.any_grad(&ids);
        self.push(
            Mat::from_elem((1, 1), total),
            Op::WeightedSum(terms.to_vec()),
            rg,
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: NodeId) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward: root must be scalar"
        );
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Grads::default();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(pid) = node.param {
                        match out.map.get_mut(&pid) {
                            Some(acc) => *acc += &g,
                            None => {
                                out.map.insert(pid, g);
                            }
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    if self.requires_grad(*x) {
                        accumulate(&mut grads, *x, g.dot(self.value(*w)));
                    }
                    if self.requires_grad(*w) {
                        accumulate(&mut grads, *w, g.t().dot(self.value(*x)));
                    }
                    if let Some(b) = b {
                        if self.requires_grad(*b) {
                            accumulate(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                        }
                    }
                }
                Op::Conv2d { x, w, geom } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let plane = geom.out_h() * geom.out_w();
                    let need_x = self.requires_grad(*x);
                    let need_w = self.requires_grad(*w);
                    let mut dx = need_x.then(|| Mat::zeros(xv.dim()));
                    let mut dw = need_w.then(|| Mat::zeros(wv.dim()));
                    let mut cols = Mat::zeros((geom.patch_len(), plane));
                    for b in 0..xv.nrows() {
                        let gy = g
                            .row(b)
                            .to_owned()
                            .into_shape_with_order((geom.out_channels, plane))
                            .expect("conv2d grad shape");
                        if let Some(dw) = dw.as_mut() {
                            im2col(xv.row(b).as_slice().expect("contiguous"), geom, &mut cols);
                            *dw += &gy.dot(&cols.t());
                        }
                        if let Some(dx) = dx.as_mut() {
                            let dcols = wv.t().dot(&gy);
                            col2im_add(
                                &dcols,
                                geom,
                                dx.row_mut(b).as_slice_mut().expect("contiguous"),
                            );
                        }
                    }
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dw) = dw {
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    layout,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let cols = xhat.ncols();
                    let channels = layout.channels(cols);
                    let spatial = layout.spatial();
                    let n = (xhat.nrows() * spatial) as f64;
                    let gv = self.value(*gamma).row(0).to_vec();
                    let mut dgamma = vec![0.0; channels];
                    let mut dbeta = vec![0.0; channels];
                    Zip::from(g.rows()).and(xhat.rows()).for_each(|gr, xr| {
                        for j in 0..cols {
                            dgamma[j / spatial] += gr[j] * xr[j];
                            dbeta[j / spatial] += gr[j];
                        }
                    });
                    if self.requires_grad(*x) {
                        let mut dx = Mat::zeros(xhat.dim());
                        Zip::from(dx.rows_mut())
                            .and(g.rows())
                            .and(xhat.rows())
                            .for_each(|mut dr, gr, xr| {
                                for j in 0..cols {
                                    let c = j / spatial;
                                    let dxhat = gr[j] * gv[c];
                                    dr[j] = if *batch_stats {
                                        // dgamma/gamma = sum(dxhat * xhat), dbeta = sum(dxhat)/gamma
                                        inv_std[c] / n
                                            * (n * dxhat
                                                - gv[c] * dbeta[c]
                                                - xr[j] * gv[c] * dgamma[c])
                                    } else {
                                        dxhat * inv_std[c]
                                    };
                                }
                            });
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.requires_grad(*gamma) {
                        accumulate(
                            &mut grads,
                            *gamma,
                            Array1::from(dgamma).insert_axis(Axis(0)),
                        );
                    }
                    if self.requires_grad(*beta) {
                        accumulate(&mut grads, *beta, Array1::from(dbeta).insert_axis(Axis(0)));
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    Zip::from(&mut dx).and(self.value(*x)).for_each(|d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    if self.requires_grad(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.requires_grad(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AvgPool {
                    x,
                    channels,
                    spatial,
                } => {
                    let mut dx = Mat::zeros((g.nrows(), channels * spatial));
                    for (b, mut row) in dx.rows_mut().into_iter().enumerate() {
                        for c in 0..*channels {
                            let v = g[[b, c]] / *spatial as f64;
                            row.slice_mut(s![c * spatial..(c + 1) * spatial]).fill(v);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let rows = self.value(*p).nrows();
                        if self.requires_grad(*p) {
                            accumulate(
                                &mut grads,
                                *p,
                                g.slice(s![start..start + rows, ..]).to_owned(),
                            );
                        }
                        start += rows;
                    }
                }
                Op::Slice { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    dx.slice_mut(s![rows.clone(), ..]).assign(&g);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gather { x, rows } => {
                    let mut dx = Mat::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Loss(inputs) => {
                    let up = g[[0, 0]];
                    for (id, local) in inputs {
                        if self.requires_grad(*id) {
                            accumulate(&mut grads, *id, local * up);
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    let up = g[[0, 0]];
                    for (id, w) in terms {
                        if self.requires_grad(*id) {
                            accumulate(&mut grads, *id, Mat::from_elem((1, 1), up * w));
                        }
                    }
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Unfold one image `[C, H, W]` into patch columns `[C*k*k, Ho*Wo]`.
fn im2col(x: &[f64], geom: &ConvGeom, cols: &mut Mat) {
    let (k, st, pad) = (geom.kernel, geom.stride, geom.pad as isize);
    let (h, w) = (geom.in_h as isize, geom.in_w as isize);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    for c in 0..geom.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let mut row = cols.row_mut(r);
                for oy in 0..oh {
                    let iy = (oy * st + ky) as isize - pad;
                    for ox in 0..ow {
                        let ix = (ox * st + kx) as isize - pad;
                        row[oy * ow + ox] = if iy >= 0 && iy < h && ix >= 0 && ix < w {
                            x[(c * geom.in_h + iy as usize) * geom.in_w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &Mat, geom: &ConvGeom, dx: &mut [f64]) {
    let (k, st, pad) = (geom.kernel, geom.stride, geom.pad as isize);
    let (h, w) = (geom.in_h as isize, geom.in_w as isize);
    let (oh, ow) = (geom.out_h(), geom.out_w());
    for c in 0..geom.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let r = (c * k + ky) * k + kx;
                let row = cols.row(r);
                for oy in 0..oh {
                    let iy = (oy * st + ky) as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * st + kx) as isize - pad;
                        if ix >= 0 && ix < w {
                            dx[(c * geom.in_h + iy as usize) * geom.in_w + ix as usize] +=
                                row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

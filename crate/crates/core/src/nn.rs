//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Tensors are `(batch, channels, height, width)` in standard layout. Only the
//! pieces needed for ResNet-style stems and residual stages are provided.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exec;

pub type Tensor = Array4<f32>;

/// Read access to named tensors while loading weights.
pub type TensorLookup<'a> = dyn Fn(&str) -> Option<(Vec<usize>, Vec<f32>)> + 'a;

#[derive(Clone, Debug)]
pub struct Conv2d {
    /// `(out_channels, in_channels, kernel_h, kernel_w)`
    pub weight: Array4<f32>,
    pub bias: Option<Array1<f32>>,
    pub stride: usize,
    pub padding: usize,
    grad_weight: Option<Array4<f32>>,
    grad_bias: Option<Array1<f32>>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            weight: Array4::zeros((out_channels, in_channels, kernel, kernel)),
            bias: bias.then(|| Array1::zeros(out_channels)),
            stride,
            padding,
            grad_weight: None,
            grad_bias: None,
        }
    }

    /// Fan-in scaled normal initialization (std = sqrt(2 / fan_in)).
    pub fn init_fan_in<R: Rng>(&mut self, rng: &mut R) {
        let (_, ci, kh, kw) = self.weight.dim();
        let std = (2.0 / (ci * kh * kw) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        self.weight
            .iter_mut()
            .for_each(|w| *w = normal.sample(rng) as f32);
        if let Some(b) = self.bias.as_mut() {
            b.fill(0.0);
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    fn kernel(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (kh, kw)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        (
            (h + 2 * self.padding - kh) / self.stride + 1,
            (w + 2 * self.padding - kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1) && self.stride == 1 && self.padding == 0
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        let (co, ci, kh, kw) = self.weight.dim();
        self.weight
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .expect("conv weight is contiguous")
    }

    fn columns(&self, x: ArrayView3<'_, f32>) -> Array2<f32> {
        let (c, h, w) = x.dim();
        if self.is_pointwise() {
            return x
                .to_owned()
                .into_shape_with_order((c, h * w))
                .expect("contiguous sample");
        }
        let (kh, kw) = self.kernel();
        let (ho, wo) = self.output_hw(h, w);
        im2col(x, kh, kw, self.stride, self.padding, ho, wo)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels(), "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let co = self.out_channels();
        let wm = self.weight_matrix();
        let outs = exec::map_range(n, |i| {
            let cols = self.columns(x.index_axis(Axis(0), i));
            let mut y = Array2::<f32>::zeros((co, ho * wo));
            general_mat_mul(1.0, &wm, &cols, 0.0, &mut y);
            if let Some(b) = &self.bias {
                y += &b.view().insert_axis(Axis(1));
            }
            y
        });
        stack_samples(outs, co, ho, wo)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let (n, c, h, w) = x.dim();
        let (_, co, ho, wo) = dy.dim();
        let (kh, kw) = self.kernel();
        let wm = self.weight_matrix();
        let this = &*self;
        let per_sample = exec::map_range(n, |i| {
            let cols = this.columns(x.index_axis(Axis(0), i));
            let dyi = dy
                .index_axis(Axis(0), i)
                .into_shape_with_order((co, ho * wo))
                .expect("contiguous gradient");
            let mut dw = Array2::<f32>::zeros((co, cols.nrows()));
            general_mat_mul(1.0, &dyi, &cols.t(), 0.0, &mut dw);
            let db = dyi.sum_axis(Axis(1));
            let dx = need_input_grad.then(|| {
                let mut dcols = Array2::<f32>::zeros((cols.nrows(), ho * wo));
                general_mat_mul(1.0, &wm.t(), &dyi, 0.0, &mut dcols);
                if this.is_pointwise() {
                    dcols
                        .into_shape_with_order((c, h, w))
                        .expect("pointwise gradient")
                } else {
                    col2im(&dcols, c, h, w, kh, kw, this.stride, this.padding, ho, wo)
                }
            });
            (dw, db, dx)
        });

        let mut gw = Array2::<f32>::zeros((co, c * kh * kw));
        let mut gb = Array1::<f32>::zeros(co);
        let mut dx_all = need_input_grad.then(|| Tensor::zeros((n, c, h, w)));
        for (i, (dw, db, dx)) in per_sample.into_iter().enumerate() {
            gw += &dw;
            gb += &db;
            if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                all.index_axis_mut(Axis(0), i).assign(&dx);
            }
        }
        let gw = gw
            .into_shape_with_order(self.weight.raw_dim())
            .expect("weight gradient shape");
        match self.grad_weight.as_mut() {
            Some(g) => *g += &gw,
            None => self.grad_weight = Some(gw),
        }
        if self.bias.is_some() {
            match self.grad_bias.as_mut() {
                Some(g) => *g += &gb,
                None => self.grad_bias = Some(gb),
            }
        }
        dx_all
    }
}

fn stack_samples(outs: Vec<Array2<f32>>, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = Tensor::zeros((outs.len(), c, h, w));
    for (i, y) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i)
            .assign(&y.into_shape_with_order((c, h, w)).expect("sample shape"));
    }
    out
}

fn im2col(
    x: ArrayView3<'_, f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f32>::zeros((c * kh * kw, ho * wo));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + iy as usize * w;
                    let dst = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            cs[dst + ox] = xs[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f32> {
    let mut x = ndarray::Array3::<f32>::zeros((c, h, w));
    let xs = x.as_slice_mut().expect("fresh array");
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = ci * h * w + iy as usize * w;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            xs[dst + ix as usize] += cs[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Array1<f32>,
    pub beta: Array1<f32>,
    pub running_mean: Array1<f32>,
    pub running_var: Array1<f32>,
    pub eps: f32,
    pub momentum: f32,
    grad_gamma: Option<Array1<f32>>,
    grad_beta: Option<Array1<f32>>,
}

#[derive(Debug)]
pub struct BnTrace {
    normalized: Tensor,
    inv_std: Array1<f32>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            grad_gamma: None,
            grad_beta: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Inference mode: running statistics only.
    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let scale: Array1<f32> = Zip::from(&self.gamma)
            .and(&self.running_var)
            .map_collect(|&g, &v| g / (v + self.eps).sqrt());
        let shift: Array1<f32> = Zip::from(&self.beta)
            .and(&self.running_mean)
            .and(&scale)
            .map_collect(|&b, &m, &s| b - m * s);
        let mut y = x.clone();
        for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (s, t) = (scale[c], shift[c]);
            plane.mapv_inplace(|v| v * s + t);
        }
        y
    }

    /// Training mode: normalizes with batch statistics and updates the
    /// running estimates.
    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BnTrace) {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut normalized = x.clone();
        let mut inv_std = Array1::<f32>::zeros(c);
        let mut y = x.clone();
        for ch in 0..c {
            let plane = x.index_axis(Axis(1), ch);
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / count;
            let var = plane
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / count;
            let istd = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = istd as f32;
            let (g, b) = (self.gamma[ch], self.beta[ch]);
            let mut nplane = normalized.index_axis_mut(Axis(1), ch);
            nplane.mapv_inplace(|v| ((v as f64 - mean) * istd) as f32);
            Zip::from(y.index_axis_mut(Axis(1), ch))
                .and(&nplane)
                .for_each(|yv, &xh| *yv = xh * g + b);
            let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
            let m = self.momentum;
            self.running_mean[ch] = (1.0 - m) * self.running_mean[ch] + m * mean as f32;
            self.running_var[ch] = (1.0 - m) * self.running_var[ch] + m * unbiased as f32;
        }
        (y, BnTrace { normalized, inv_std })
    }

    pub fn backward(&mut self, trace: &BnTrace, dy: &Tensor) -> Tensor {
        let (n, c, h, w) = dy.dim();
        let count = (n * h * w) as f64;
        let mut dx = Tensor::zeros(dy.raw_dim());
        let mut gg = Array1::<f32>::zeros(c);
        let mut gb = Array1::<f32>::zeros(c);
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = trace.normalized.index_axis(Axis(1), ch);
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xh = 0.0f64;
            Zip::from(&dyc).and(&xh).for_each(|&d, &x| {
                sum_dy += d as f64;
                sum_dy_xh += d as f64 * x as f64;
            });
            gg[ch] = sum_dy_xh as f32;
            gb[ch] = sum_dy as f32;
            let k = self.gamma[ch] as f64 * trace.inv_std[ch] as f64 / count;
            Zip::from(dx.index_axis_mut(Axis(1), ch))
                .and(&dyc)
                .and(&xh)
                .for_each(|o, &d, &x| {
                    *o = (k * (count * d as f64 - sum_dy - x as f64 * sum_dy_xh)) as f32
                });
        }
        match self.grad_gamma.as_mut() {
            Some(g) => *g += &gg,
            None => self.grad_gamma = Some(gg),
        }
        match self.grad_beta.as_mut() {
            Some(g) => *g += &gb,
            None => self.grad_beta = Some(gb),
        }
        dx
    }
}

fn relu(x: Tensor) -> Tensor {
    x.mapv_into(|v| v.max(0.0))
}

fn relu_backward(output: &Tensor, mut dy: Tensor) -> Tensor {
    Zip::from(&mut dy)
        .and(output)
        .for_each(|d, &y| {
            if y <= 0.0 {
                *d = 0.0
            }
        });
    dy
}

fn max_pool(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Tensor {
    let (n, c, h, w) = x.dim();
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut y = Tensor::from_elem((n, c, ho, wo), f32::NEG_INFINITY);
    for ((b, ch, oy, ox), v) in y.indexed_iter_mut() {
        for ky in 0..kernel {
            let iy = (oy * stride + ky) as isize - padding as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..kernel {
                let ix = (ox * stride + kx) as isize - padding as isize;
                if ix >= 0 && ix < w as isize {
                    *v = v.max(x[[b, ch, iy as usize, ix as usize]]);
                }
            }
        }
    }
    y
}

#[derive(Clone, Debug)]
pub enum Op {
    Conv(Conv2d),
    Norm(BatchNorm2d),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug)]
pub enum OpTrace {
    Conv { input: Tensor },
    Norm(BnTrace),
    Relu { output: Tensor },
}

impl Op {
    fn forward_eval(&self, x: Tensor) -> Tensor {
        match self {
            Op::Conv(c) => c.forward(&x),
            Op::Norm(bn) => bn.forward_eval(&x),
            Op::Relu => relu(x),
            Op::MaxPool {
                kernel,
                stride,
                padding,
            } => max_pool(&x, *kernel, *stride, *padding),
        }
    }

    fn forward_train(&mut self, x: Tensor) -> (Tensor, OpTrace) {
        match self {
            Op::Conv(c) => {
                let y = c.forward(&x);
                (y, OpTrace::Conv { input: x })
            }
            Op::Norm(bn) => {
                let (y, t) = bn.forward_train(&x);
                (y, OpTrace::Norm(t))
            }
            Op::Relu => {
                let y = relu(x);
                (y.clone(), OpTrace::Relu { output: y })
            }
            Op::MaxPool { .. } => panic!("max pooling is inference-only"),
        }
    }

    fn backward(&mut self, trace: OpTrace, dy: Tensor, need_input_grad: bool) -> Option<Tensor> {
        match (self, trace) {
            (Op::Conv(c), OpTrace::Conv { input }) => c.backward(&input, &dy, need_input_grad),
            (Op::Norm(bn), OpTrace::Norm(t)) => Some(bn.backward(&t, &dy)),
            (Op::Relu, OpTrace::Relu { output }) => Some(relu_backward(&output, dy)),
            _ => unreachable!("trace does not match op"),
        }
    }
}

fn chain_eval(ops: &[Op], x: Tensor) -> Tensor {
    ops.iter().fold(x, |acc, op| op.forward_eval(acc))
}

fn chain_train(ops: &mut [Op], mut x: Tensor) -> (Tensor, Vec<OpTrace>) {
    let mut traces = Vec::with_capacity(ops.len());
    for op in ops.iter_mut() {
        let (y, t) = op.forward_train(x);
        traces.push(t);
        x = y;
    }
    (x, traces)
}

fn chain_backward(
    ops: &mut [Op],
    traces: Vec<OpTrace>,
    mut dy: Tensor,
    need_input_grad: bool,
) -> Option<Tensor> {
    for (idx, (op, trace)) in ops.iter_mut().zip(traces).enumerate().rev() {
        let need = need_input_grad || idx > 0;
        {
            let d = op.backward(trace, dy, need)?;
            dy = d
        }
    }
    Some(dy)
}

/// Names ops the way torchvision state dicts do: `conv1`, `bn1`, `conv2`, ...
fn main_op_names(ops: &[Op]) -> Vec<Option<String>> {
    let (mut convs, mut norms) = (0, 0);
    ops.iter()
        .map(|op| match op {
            Op::Conv(_) => {
                convs += 1;
                Some(format!("conv{convs}"))
            }
            Op::Norm(_) => {
                norms += 1;
                Some(format!("bn{norms}"))
            }
            _ => None,
        })
        .collect()
}

fn shortcut_op_names(ops: &[Op]) -> Vec<Option<String>> {
    ops.iter()
        .enumerate()
        .map(|(i, op)| match op {
            Op::Conv(_) | Op::Norm(_) => Some(format!("downsample.{i}")),
            _ => None,
        })
        .collect()
}

/// Residual unit: `relu(main(x) + shortcut(x))`, with an empty shortcut meaning identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub main: Vec<Op>,
    pub shortcut: Vec<Op>,
}

#[derive(Debug)]
pub struct BlockTrace {
    main: Vec<OpTrace>,
    shortcut: Vec<OpTrace>,
    output: Tensor,
}

impl ResidualBlock {
    /// Two 3×3 convolutions.
    pub fn basic(in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let main = vec![
            Op::Conv(Conv2d::new(in_ch, out_ch, 3, stride, 1, false)),
            Op::Norm(BatchNorm2d::new(out_ch)),
            Op::Relu,
            Op::Conv(Conv2d::new(out_ch, out_ch, 3, 1, 1, false)),
            Op::Norm(BatchNorm2d::new(out_ch)),
        ];
        ResidualBlock {
            main,
            shortcut: projection(in_ch, out_ch, stride),
        }
    }

    /// 1×1 → 3×3 (strided) → 1×1 bottleneck.
    pub fn bottleneck(in_ch: usize, width: usize, out_ch: usize, stride: usize) -> Self {
        let main = vec![
            Op::Conv(Conv2d::new(in_ch, width, 1, 1, 0, false)),
            Op::Norm(BatchNorm2d::new(width)),
            Op::Relu,
            Op::Conv(Conv2d::new(width, width, 3, stride, 1, false)),
            Op::Norm(BatchNorm2d::new(width)),
            Op::Relu,
            Op::Conv(Conv2d::new(width, out_ch, 1, 1, 0, false)),
            Op::Norm(BatchNorm2d::new(out_ch)),
        ];
        ResidualBlock {
            main,
            shortcut: projection(in_ch, out_ch, stride),
        }
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut y = chain_eval(&self.main, x.clone());
        if self.shortcut.is_empty() {
            y += x;
        } else {
            y += &chain_eval(&self.shortcut, x.clone());
        }
        relu(y)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> (Tensor, BlockTrace) {
        let (mut y, main) = chain_train(&mut self.main, x.clone());
        let shortcut = if self.shortcut.is_empty() {
            y += x;
            Vec::new()
        } else {
            let (s, t) = chain_train(&mut self.shortcut, x.clone());
            y += &s;
            t
        };
        let y = relu(y);
        (
            y.clone(),
            BlockTrace {
                main,
                shortcut,
                output: y,
            },
        )
    }

    pub fn backward(&mut self, trace: BlockTrace, dy: Tensor, need_input_grad: bool) -> Option<Tensor> {
        let d_sum = relu_backward(&trace.output, dy);
        let d_main = chain_backward(&mut self.main, trace.main, d_sum.clone(), need_input_grad);
        if !need_input_grad {
            if !self.shortcut.is_empty() {
                chain_backward(&mut self.shortcut, trace.shortcut, d_sum, false);
            }
            return None;
        }
        let mut dx = d_main.expect("input gradient requested");
        if self.shortcut.is_empty() {
            dx += &d_sum;
        } else {
            let ds = chain_backward(&mut self.shortcut, trace.shortcut, d_sum, true)
                .expect("input gradient requested");
            dx += &ds;
        }
        Some(dx)
    }

    fn ops_named(&self) -> Vec<(String, &Op)> {
        let mut out = Vec::new();
        for (name, op) in main_op_names(&self.main).into_iter().zip(&self.main) {
            if let Some(n) = name {
                out.push((n, op));
            }
        }
        for (name, op) in shortcut_op_names(&self.shortcut)
            .into_iter()
            .zip(&self.shortcut)
        {
            if let Some(n) = name {
                out.push((n, op));
            }
        }
        out
    }

    fn ops_named_mut(&mut self) -> Vec<(String, &mut Op)> {
        let main_names = main_op_names(&self.main);
        let short_names = shortcut_op_names(&self.shortcut);
        let mut out = Vec::new();
        for (name, op) in main_names.into_iter().zip(self.main.iter_mut()) {
            if let Some(n) = name {
                out.push((n, op));
            }
        }
        for (name, op) in short_names.into_iter().zip(self.shortcut.iter_mut()) {
            if let Some(n) = name {
                out.push((n, op));
            }
        }
        out
    }
}

fn projection(in_ch: usize, out_ch: usize, stride: usize) -> Vec<Op> {
    if in_ch == out_ch && stride == 1 {
        Vec::new()
    } else {
        vec![
            Op::Conv(Conv2d::new(in_ch, out_ch, 1, stride, 0, false)),
            Op::Norm(BatchNorm2d::new(out_ch)),
        ]
    }
}

/// One feature level of a backbone: either the input stem or a residual stage.
#[derive(Clone, Debug)]
pub enum LevelModule {
    Stem(Vec<Op>),
    Stage(Vec<ResidualBlock>),
}

pub enum LevelTrace {
    Stage(Vec<BlockTrace>),
}

impl LevelModule {
    /// Conv → norm → relu → 3×3/2 max-pool.
    pub fn stem(out_ch: usize, kernel: usize) -> Self {
        LevelModule::Stem(vec![
            Op::Conv(Conv2d::new(3, out_ch, kernel, 2, kernel / 2, false)),
            Op::Norm(BatchNorm2d::new(out_ch)),
            Op::Relu,
            Op::MaxPool {
                kernel: 3,
                stride: 2,
                padding: 1,
            },
        ])
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        match self {
            LevelModule::Stem(ops) => chain_eval(ops, x.clone()),
            LevelModule::Stage(blocks) => {
                let mut y = x.clone();
                for b in blocks {
                    y = b.forward_eval(&y);
                }
                y
            }
        }
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<(Tensor, LevelTrace)> {
        match self {
            LevelModule::Stem(_) => Err(Error::contract("stem modules are never trained")),
            LevelModule::Stage(blocks) => {
                let mut traces = Vec::with_capacity(blocks.len());
                let mut y = x.clone();
                for b in blocks.iter_mut() {
                    let (out, t) = b.forward_train(&y);
                    traces.push(t);
                    y = out;
                }
                Ok((y, LevelTrace::Stage(traces)))
            }
        }
    }

    /// Backpropagates `dy` through a stage. The stage input is a frozen
    /// teacher activation, so no input gradient is produced.
    pub fn backward(&mut self, trace: LevelTrace, dy: Tensor) {
        let (LevelModule::Stage(blocks), LevelTrace::Stage(traces)) = (self, trace) else {
            unreachable!("only stages are trained");
        };
        let mut d = dy;
        for (idx, (b, t)) in blocks.iter_mut().zip(traces).enumerate().rev() {
            match b.backward(t, d, idx > 0) {
                Some(next) => d = next,
                None => break,
            }
        }
    }

    fn named_ops(&self) -> Vec<(String, &Op)> {
        match self {
            LevelModule::Stem(ops) => main_op_names(ops)
                .into_iter()
                .zip(ops)
                .filter_map(|(n, op)| n.map(|n| (n, op)))
                .collect(),
            LevelModule::Stage(blocks) => blocks
                .iter()
                .enumerate()
                .flat_map(|(i, b)| {
                    b.ops_named()
                        .into_iter()
                        .map(move |(n, op)| (format!("{i}.{n}"), op))
                })
                .collect(),
        }
    }

    fn named_ops_mut(&mut self) -> Vec<(String, &mut Op)> {
        match self {
            LevelModule::Stem(ops) => {
                let names = main_op_names(ops);
                names
                    .into_iter()
                    .zip(ops.iter_mut())
                    .filter_map(|(n, op)| n.map(|n| (n, op)))
                    .collect()
            }
            LevelModule::Stage(blocks) => blocks
                .iter_mut()
                .enumerate()
                .flat_map(|(i, b)| {
                    b.ops_named_mut()
                        .into_iter()
                        .map(move |(n, op)| (format!("{i}.{n}"), op))
                })
                .collect(),
        }
    }

    /// Fresh random parameters: fan-in normal convolutions, unit-gain norms.
    pub fn init_fresh<R: Rng>(&mut self, rng: &mut R) {
        for (_, op) in self.named_ops_mut() {
            match op {
                Op::Conv(c) => c.init_fan_in(rng),
                Op::Norm(bn) => *bn = BatchNorm2d::new(bn.channels()),
                _ => {}
            }
        }
    }

    /// Visits every stored tensor (parameters and running statistics) with
    /// its state-dict name under `prefix`.
    pub fn visit_tensors(&self, prefix: &str, f: &mut dyn FnMut(String, Vec<usize>, &[f32])) {
        for (name, op) in self.named_ops() {
            let base = join(prefix, &name);
            match op {
                Op::Conv(c) => {
                    f(
                        format!("{base}.weight"),
                        c.weight.shape().to_vec(),
                        c.weight.as_slice().expect("contiguous"),
                    );
                    if let Some(b) = &c.bias {
                        f(format!("{base}.bias"), vec![b.len()], b.as_slice().expect("contiguous"));
                    }
                }
                Op::Norm(bn) => {
                    for (suffix, t) in [
                        ("weight", &bn.gamma),
                        ("bias", &bn.beta),
                        ("running_mean", &bn.running_mean),
                        ("running_var", &bn.running_var),
                    ] {
                        f(
                            format!("{base}.{suffix}"),
                            vec![t.len()],
                            t.as_slice().expect("contiguous"),
                        );
                    }
                }
                _ => {}
            }
        }
    }

    /// Overwrites every tensor from `lookup`. Missing names and shape
    /// mismatches are appended to `problems` as `name: expected vs found`.
    pub fn load_tensors(&mut self, prefix: &str, lookup: &TensorLookup<'_>, problems: &mut Vec<String>) {
        let mut fill = |name: String, dst: &mut [f32], shape: &[usize]| match lookup(&name) {
            None => problems.push(format!("{name}: expected {shape:?}, found <missing>")),
            Some((found, data)) => {
                if found != shape || data.len() != dst.len() {
                    problems.push(format!("{name}: expected {shape:?}, found {found:?}"));
                } else {
                    dst.copy_from_slice(&data);
                }
            }
        };
        for (name, op) in self.named_ops_mut() {
            let base = join(prefix, &name);
            match op {
                Op::Conv(c) => {
                    let shape = c.weight.shape().to_vec();
                    fill(
                        format!("{base}.weight"),
                        c.weight.as_slice_mut().expect("contiguous"),
                        &shape,
                    );
                    if let Some(b) = c.bias.as_mut() {
                        let shape = vec![b.len()];
                        fill(format!("{base}.bias"), b.as_slice_mut().expect("contiguous"), &shape);
                    }
                }
                Op::Norm(bn) => {
                    let shape = vec![bn.channels()];
                    for (suffix, t) in [
                        ("weight", &mut bn.gamma),
                        ("bias", &mut bn.beta),
                        ("running_mean", &mut bn.running_mean),
                        ("running_var", &mut bn.running_var),
                    ] {
                        fill(
                            format!("{base}.{suffix}"),
                            t.as_slice_mut().expect("contiguous"),
                            &shape,
                        );
                    }
                }
                _ => {}
            }
        }
    }

    /// Visits trainable parameters with their accumulated gradients, in a
    /// fixed order. Parameters without a gradient see an empty slice.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f32], &[f32])) {
        for (_, op) in self.named_ops_mut() {
            match op {
                Op::Conv(c) => {
                    let g = c.grad_weight.as_ref().map(|g| g.as_slice().expect("contiguous"));
                    f(c.weight.as_slice_mut().expect("contiguous"), g.unwrap_or(&[]));
                    if let Some(b) = c.bias.as_mut() {
                        let g = c.grad_bias.as_ref().map(|g| g.as_slice().expect("contiguous"));
                        f(b.as_slice_mut().expect("contiguous"), g.unwrap_or(&[]));
                    }
                }
                Op::Norm(bn) => {
                    let g = bn.grad_gamma.as_ref().map(|g| g.as_slice().expect("contiguous"));
                    f(bn.gamma.as_slice_mut().expect("contiguous"), g.unwrap_or(&[]));
                    let g = bn.grad_beta.as_ref().map(|g| g.as_slice().expect("contiguous"));
                    f(bn.beta.as_slice_mut().expect("contiguous"), g.unwrap_or(&[]));
                }
                _ => {}
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for (_, op) in self.named_ops_mut() {
            match op {
                Op::Conv(c) => {
                    c.grad_weight = None;
                    c.grad_bias = None;
                }
                Op::Norm(bn) => {
                    bn.grad_gamma = None;
                    bn.grad_beta = None;
                }
                _ => {}
            }
        }
    }

    /// `(name, shape)` for every stored tensor; used as a topology fingerprint.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_tensors("", &mut |n, s, _| out.push((n, s)));
        out
    }

    pub fn in_channels(&self) -> usize {
        let first = match self {
            LevelModule::Stem(ops) => ops.first(),
            LevelModule::Stage(blocks) => blocks.first().and_then(|b| b.main.first()),
        };
        match first {
            Some(Op::Conv(c)) => c.in_channels(),
            _ => 0,
        }
    }

    pub fn out_channels(&self) -> usize {
        let last_conv = |ops: &[Op]| {
            ops.iter()
                .rev()
                .find_map(|op| match op {
                    Op::Conv(c) => Some(c.out_channels()),
                    _ => None,
                })
                .unwrap_or(0)
        };
        match self {
            LevelModule::Stem(ops) => last_conv(ops),
            LevelModule::Stage(blocks) => blocks.last().map(|b| last_conv(&b.main)).unwrap_or(0),
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// SHA-256 over every tensor name, shape and value bit pattern.
pub fn checksum<'a>(modules: impl IntoIterator<Item = (String, &'a LevelModule)>) -> String {
    let mut hasher = Sha256::new();
    for (prefix, m) in modules {
        m.visit_tensors(&prefix, &mut |name, shape, data| {
            hasher.update(name.as_bytes());
            for s in shape {
                hasher.update((s as u64).to_le_bytes());
            }
            for v in data {
                hasher.update(v.to_bits().to_le_bytes());
            }
        });
    }
    format!("{:x}", hasher.finalize())
}

//! Reverse-mode automatic differentiation over field-valued computations.
//!
//! A `Tape` records primitive operations on dense real tensors; `grad`
//! replays them backwards to produce exact gradients of a scalar output.
//! Complex-valued intermediates (FFT outputs, spectral weights) are stored
//! as real tensors with doubled channel count: the first half holds the
//! real parts, the second half the imaginary parts. All FFTs here are
//! unitary (1/sqrt(N) both ways), so the adjoint of the forward transform
//! is the inverse transform.

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fft;
use crate::field::{Field, Grid2D, Mask};

const GROUP_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// channels x ny x nx, row-major
    Grid { channels: usize, ny: usize, nx: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Grid { channels, ny, nx } => channels * ny * nx,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Autodiff(format!(
                "tensor data length {} does not match shape length {}",
                data.len(),
                shape.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![0.0; shape.len()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: Shape::Scalar, data: vec![v] }
    }

    pub fn from_field(f: &Field) -> Self {
        Tensor {
            shape: Shape::Grid {
                channels: f.channels,
                ny: f.grid.ny,
                nx: f.grid.nx,
            },
            data: f.values().to_vec(),
        }
    }

    pub fn to_field(&self) -> Result<Field> {
        match self.shape {
            Shape::Grid { channels, ny, nx } => {
                Field::new(Grid2D::new(nx, ny)?, channels, self.data.clone())
            }
            _ => Err(Error::Autodiff("tensor is not grid-shaped".into())),
        }
    }

    pub fn scalar_value(&self) -> Result<f64> {
        match self.shape {
            Shape::Scalar => Ok(self.data[0]),
            _ => Err(Error::Autodiff("tensor is not a scalar".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Retained spectral band: frequencies |ky| < my and |kx| < mx.
#[derive(Debug, Clone, Copy)]
pub struct ModeBand {
    pub my: usize,
    pub mx: usize,
}

impl ModeBand {
    /// DFT indices of the retained signed frequencies along an axis of size n.
    fn axis_indices(m: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..m.min(n)).collect();
        for k in 1..m {
            if k < (n + 1) / 2 && n - k >= m {
                idx.push(n - k);
            }
        }
        idx
    }

    pub fn mode_indices(&self, ny: usize, nx: usize) -> Vec<(usize, usize)> {
        let ys = Self::axis_indices(self.my, ny);
        let xs = Self::axis_indices(self.mx, nx);
        let mut out = Vec::with_capacity(ys.len() * xs.len());
        for &iy in &ys {
            for &ix in &xs {
                out.push((iy, ix));
            }
        }
        out
    }

    pub fn mode_count(&self) -> usize {
        (2 * self.my - 1) * (2 * self.mx - 1)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { requires_grad: bool },
    Add,
    Sub,
    Neg,
    ScalarMul(f64),
    AddConst,
    Mul,
    Div,
    /// 1x1 channel mixing: weight Vector(co*ci), input Grid(ci).
    ChannelMix { co: usize, ci: usize },
    /// Dense matrix-vector product: weight Vector(out*inp), input Vector(inp).
    MatVec { out: usize, inp: usize },
    /// Unitary 2-D FFT: Grid(c) -> Grid(2c) complex.
    Fft2,
    /// Real part of the unitary inverse 2-D FFT: Grid(2c) -> Grid(c).
    Ifft2Real,
    /// Zeroes spectral modes outside the band (complex tensor in, same out).
    ModeTruncate(ModeBand),
    /// Per-mode complex channel mixing on the retained band.
    SpectralConv { co: usize, ci: usize, band: ModeBand },
    /// Fourier resampling between periodic grids (value-preserving).
    FourierResample,
    /// Nearest-neighbor upsampling by an integer factor.
    UpsampleNearest(usize),
    /// Stride subsampling by an integer factor.
    DownsampleNearest(usize),
    Gelu,
    GroupNorm { groups: usize },
    /// Adds a per-channel bias vector to a grid tensor.
    ChannelBias,
    ConcatChannels,
    SumReduce,
    SquaredL2,
    HuberSum { delta: f64 },
    MaskedGather { indices: Vec<usize> },
    /// Periodic-free shift with zero fill, for stencil construction.
    Shift { dy: i64, dx: i64 },
    /// Zeroes the outermost ring of grid points.
    ZeroBoundary,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Recorded computation; one tape per sampling chain or training example.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { requires_grad: true }, vec![], value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { requires_grad: false }, vec![], value)
    }

    pub fn field_leaf(&mut self, f: &Field) -> NodeId {
        self.leaf(Tensor::from_field(f))
    }

    fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape
    }

    fn grid_shape(&self, id: NodeId, what: &str) -> Result<(usize, usize, usize)> {
        match self.shape(id) {
            Shape::Grid { channels, ny, nx } => Ok((channels, ny, nx)),
            s => Err(Error::Autodiff(format!("{what}: expected grid tensor, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Autodiff(format!(
                "{what}: shapes differ ({:?} vs {:?})",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x + y);
        let t = Tensor { shape: self.shape(a), data };
        Ok(self.push(Op::Add, vec![a, b], t))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x - y);
        let t = Tensor { shape: self.shape(a), data };
        Ok(self.push(Op::Sub, vec![a, b], t))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let data = self.nodes[a.0].value.data.iter().map(|v| -v).collect();
        let t = Tensor { shape: self.shape(a), data };
        self.push(Op::Neg, vec![a], t)
    }

    pub fn scalar_mul(&mut self, a: NodeId, s: f64) -> NodeId {
        let data = self.nodes[a.0].value.data.iter().map(|v| v * s).collect();
        let t = Tensor { shape: self.shape(a), data };
        self.push(Op::ScalarMul(s), vec![a], t)
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.nodes[a.0].value.data.iter().map(|v| v + c).collect();
        let t = Tensor { shape: self.shape(a), data };
        self.push(Op::AddConst, vec![a], t)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x * y);
        let t = Tensor { shape: self.shape(a), data };
        Ok(self.push(Op::Mul, vec![a, b], t))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let data = zip_map(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x / y);
        let t = Tensor { shape: self.shape(a), data };
        Ok(self.push(Op::Div, vec![a, b], t))
    }

    /// y[o, p] = sum_i w[o*ci + i] * x[i, p]
    pub fn channel_mix(&mut self, x: NodeId, w: NodeId, co: usize) -> Result<NodeId> {
        let (ci, ny, nx) = self.grid_shape(x, "channel_mix")?;
        let wlen = self.shape(w).len();
        if wlen != co * ci {
            return Err(Error::Autodiff(format!(
                "channel_mix: weight length {wlen} != {co}x{ci}"
            )));
        }
        let n = ny * nx;
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let mut out = vec![0.0; co * n];
        for o in 0..co {
            for i in 0..ci {
                let w_oi = wv[o * ci + i];
                if w_oi == 0.0 {
                    continue;
                }
                let src = &xv[i * n..(i + 1) * n];
                let dst = &mut out[o * n..(o + 1) * n];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w_oi * s;
                }
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: co, ny, nx },
            data: out,
        };
        Ok(self.push(Op::ChannelMix { co, ci }, vec![x, w], t))
    }

    pub fn matvec(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let inp = match self.shape(v) {
            Shape::Vector(n) => n,
            s => return Err(Error::Autodiff(format!("matvec: expected vector, got {s:?}"))),
        };
        let wlen = self.shape(w).len();
        if wlen % inp != 0 {
            return Err(Error::Autodiff("matvec: weight length not divisible by input".into()));
        }
        let out = wlen / inp;
        let wv = &self.nodes[w.0].value.data;
        let vv = &self.nodes[v.0].value.data;
        let data: Vec<f64> = (0..out)
            .map(|o| (0..inp).map(|i| wv[o * inp + i] * vv[i]).sum())
            .collect();
        let t = Tensor { shape: Shape::Vector(out), data };
        Ok(self.push(Op::MatVec { out, inp }, vec![w, v], t))
    }

    pub fn fft2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "fft2")?;
        let n = ny * nx;
        let scale = 1.0 / (n as f64).sqrt();
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; 2 * c * n];
        for ch in 0..c {
            let spec = fft::fft2_real(&xv[ch * n..(ch + 1) * n], ny, nx);
            for (p, v) in spec.iter().enumerate() {
                out[ch * n + p] = v.re * scale;
                out[(c + ch) * n + p] = v.im * scale;
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: 2 * c, ny, nx },
            data: out,
        };
        Ok(self.push(Op::Fft2, vec![x], t))
    }

    pub fn ifft2_real(&mut self, z: NodeId) -> Result<NodeId> {
        let (c2, ny, nx) = self.grid_shape(z, "ifft2_real")?;
        if c2 % 2 != 0 {
            return Err(Error::Autodiff("ifft2_real: odd channel count".into()));
        }
        let c = c2 / 2;
        let n = ny * nx;
        let scale = (n as f64).sqrt();
        let zv = &self.nodes[z.0].value.data;
        let mut out = vec![0.0; c * n];
        let mut buf = vec![Complex64::default(); n];
        for ch in 0..c {
            for p in 0..n {
                buf[p] = Complex64::new(zv[ch * n + p], zv[(c + ch) * n + p]);
            }
            let mut b = buf.clone();
            fft::ifft2(&mut b, ny, nx);
            for p in 0..n {
                out[ch * n + p] = b[p].re * scale;
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny, nx },
            data: out,
        };
        Ok(self.push(Op::Ifft2Real, vec![z], t))
    }

    pub fn mode_truncate(&mut self, z: NodeId, band: ModeBand) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(z, "mode_truncate")?;
        let n = ny * nx;
        let mut keep = vec![false; n];
        for (iy, ix) in band.mode_indices(ny, nx) {
            keep[iy * nx + ix] = true;
        }
        let zv = &self.nodes[z.0].value.data;
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for p in 0..n {
                if keep[p] {
                    out[ch * n + p] = zv[ch * n + p];
                }
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny, nx },
            data: out,
        };
        Ok(self.push(Op::ModeTruncate(band), vec![z], t))
    }

    /// Complex per-mode channel mixing on the retained band.
    /// `x` is a complex tensor (2*ci channels); `w` is Vector(2*co*ci*modes)
    /// laid out [re/im][o][i][mode].
    pub fn spectral_conv(&mut self, x: NodeId, w: NodeId, co: usize, band: ModeBand) -> Result<NodeId> {
        let (c2, ny, nx) = self.grid_shape(x, "spectral_conv")?;
        if c2 % 2 != 0 {
            return Err(Error::Autodiff("spectral_conv: input must be complex".into()));
        }
        let ci = c2 / 2;
        let modes = band.mode_indices(ny, nx);
        let wlen = self.shape(w).len();
        if wlen != 2 * co * ci * band.mode_count() {
            return Err(Error::Autodiff(format!(
                "spectral_conv: weight length {wlen} != 2*{co}*{ci}*{}",
                band.mode_count()
            )));
        }
        if modes.len() != band.mode_count() {
            return Err(Error::Autodiff(format!(
                "spectral_conv: band ({}, {}) exceeds grid Nyquist for {}x{}",
                band.my, band.mx, ny, nx
            )));
        }
        let n = ny * nx;
        let nm = modes.len();
        let xv = &self.nodes[x.0].value.data;
        let wv = &self.nodes[w.0].value.data;
        let half = co * ci * nm;
        let mut out = vec![0.0; 2 * co * n];
        for (m, &(iy, ix)) in modes.iter().enumerate() {
            let p = iy * nx + ix;
            for o in 0..co {
                let mut acc_re = 0.0;
                let mut acc_im = 0.0;
                for i in 0..ci {
                    let widx = (o * ci + i) * nm + m;
                    let (wr, wi) = (wv[widx], wv[half + widx]);
                    let (xr, xi) = (xv[i * n + p], xv[(ci + i) * n + p]);
                    acc_re += wr * xr - wi * xi;
                    acc_im += wr * xi + wi * xr;
                }
                out[o * n + p] = acc_re;
                out[(co + o) * n + p] = acc_im;
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: 2 * co, ny, nx },
            data: out,
        };
        Ok(self.push(Op::SpectralConv { co, ci, band }, vec![x, w], t))
    }

    pub fn fourier_resample(&mut self, x: NodeId, ty: usize, tx: usize) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "fourier_resample")?;
        let xv = &self.nodes[x.0].value.data;
        let data = fourier_resample_values(xv, c, ny, nx, ty, tx, false);
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny: ty, nx: tx },
            data,
        };
        Ok(self.push(Op::FourierResample, vec![x], t))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "upsample_nearest")?;
        let (ty, tx) = (ny * factor, nx * factor);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; c * ty * tx];
        for ch in 0..c {
            for i in 0..ty {
                for j in 0..tx {
                    out[(ch * ty + i) * tx + j] = xv[(ch * ny + i / factor) * nx + j / factor];
                }
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny: ty, nx: tx },
            data: out,
        };
        Ok(self.push(Op::UpsampleNearest(factor), vec![x], t))
    }

    pub fn downsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "downsample_nearest")?;
        if ny % factor != 0 || nx % factor != 0 {
            return Err(Error::Autodiff("downsample_nearest: size not divisible".into()));
        }
        let (ty, tx) = (ny / factor, nx / factor);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; c * ty * tx];
        for ch in 0..c {
            for i in 0..ty {
                for j in 0..tx {
                    out[(ch * ty + i) * tx + j] = xv[(ch * ny + i * factor) * nx + j * factor];
                }
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny: ty, nx: tx },
            data: out,
        };
        Ok(self.push(Op::DownsampleNearest(factor), vec![x], t))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let data = self.nodes[x.0].value.data.iter().map(|&v| gelu(v)).collect();
        let t = Tensor { shape: self.shape(x), data };
        self.push(Op::Gelu, vec![x], t)
    }

    /// Group normalization over channels with learned per-channel scale and
    /// shift; statistics are computed over (group channels, y, x).
    pub fn group_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId, groups: usize) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "group_norm")?;
        if c % groups != 0 {
            return Err(Error::Autodiff(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if self.shape(scale) != Shape::Vector(c) || self.shape(shift) != Shape::Vector(c) {
            return Err(Error::Autodiff("group_norm: scale/shift must be Vector(channels)".into()));
        }
        let n = ny * nx;
        let per = c / groups;
        let xv = &self.nodes[x.0].value.data;
        let sv = &self.nodes[scale.0].value.data;
        let bv = &self.nodes[shift.0].value.data;
        let mut out = vec![0.0; c * n];
        for g in 0..groups {
            let lo = g * per * n;
            let hi = (g + 1) * per * n;
            let m = (hi - lo) as f64;
            let mean = xv[lo..hi].iter().sum::<f64>() / m;
            let var = xv[lo..hi].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            let istd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            for ch in g * per..(g + 1) * per {
                for p in 0..n {
                    let xhat = (xv[ch * n + p] - mean) * istd;
                    out[ch * n + p] = sv[ch] * xhat + bv[ch];
                }
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny, nx },
            data: out,
        };
        Ok(self.push(Op::GroupNorm { groups }, vec![x, scale, shift], t))
    }

    pub fn channel_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "channel_bias")?;
        if self.shape(b) != Shape::Vector(c) {
            return Err(Error::Autodiff("channel_bias: bias must be Vector(channels)".into()));
        }
        let n = ny * nx;
        let xv = &self.nodes[x.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for p in 0..n {
                out[ch * n + p] = xv[ch * n + p] + bv[ch];
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny, nx },
            data: out,
        };
        Ok(self.push(Op::ChannelBias, vec![x, b], t))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, nya, nxa) = self.grid_shape(a, "concat_channels")?;
        let (cb, nyb, nxb) = self.grid_shape(b, "concat_channels")?;
        if (nya, nxa) != (nyb, nxb) {
            return Err(Error::Autodiff("concat_channels: spatial sizes differ".into()));
        }
        let mut data = self.nodes[a.0].value.data.clone();
        data.extend_from_slice(&self.nodes[b.0].value.data);
        let t = Tensor {
            shape: Shape::Grid { channels: ca + cb, ny: nya, nx: nxa },
            data,
        };
        Ok(self.push(Op::ConcatChannels, vec![a, b], t))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.push(Op::SumReduce, vec![x], Tensor::scalar(s))
    }

    pub fn squared_l2(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data.iter().map(|v| v * v).sum();
        self.push(Op::SquaredL2, vec![x], Tensor::scalar(s))
    }

    pub fn huber_sum(&mut self, x: NodeId, delta: f64) -> NodeId {
        let s: f64 = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| {
                if v.abs() <= delta {
                    0.5 * v * v
                } else {
                    delta * (v.abs() - 0.5 * delta)
                }
            })
            .sum();
        self.push(Op::HuberSum { delta }, vec![x], Tensor::scalar(s))
    }

    /// Gathers masked-in entries (channel-major, row-major order).
    pub fn masked_gather(&mut self, x: NodeId, mask: &Mask) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "masked_gather")?;
        if c != mask.channels || ny != mask.grid.ny || nx != mask.grid.nx {
            return Err(Error::Autodiff("masked_gather: mask shape differs".into()));
        }
        let indices = mask.observed_indices();
        let xv = &self.nodes[x.0].value.data;
        let data: Vec<f64> = indices.iter().map(|&i| xv[i]).collect();
        let t = Tensor { shape: Shape::Vector(data.len()), data };
        Ok(self.push(Op::MaskedGather { indices }, vec![x], t))
    }

    pub fn shift(&mut self, x: NodeId, dy: i64, dx: i64) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "shift")?;
        let xv = &self.nodes[x.0].value.data;
        let data = shift_values(xv, c, ny, nx, dy, dx);
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny, nx },
            data,
        };
        Ok(self.push(Op::Shift { dy, dx }, vec![x], t))
    }

    pub fn zero_boundary(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, ny, nx) = self.grid_shape(x, "zero_boundary")?;
        let mut data = self.nodes[x.0].value.data.clone();
        for ch in 0..c {
            for i in 0..ny {
                for j in 0..nx {
                    if i == 0 || j == 0 || i == ny - 1 || j == nx - 1 {
                        data[(ch * ny + i) * nx + j] = 0.0;
                    }
                }
            }
        }
        let t = Tensor {
            shape: Shape::Grid { channels: c, ny, nx },
            data,
        };
        Ok(self.push(Op::ZeroBoundary, vec![x], t))
    }

    /// Reverse-mode gradient of a scalar output with respect to `wrt` nodes.
    pub fn grad(&self, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
        if self.shape(output) != Shape::Scalar {
            return Err(Error::Autodiff("grad: output must be scalar".into()));
        }
        for &w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(Error::Autodiff("grad: wrt node not on tape".into()));
            }
            if let Op::Leaf { requires_grad: false } = self.nodes[w.0].op {
                return Err(Error::Autodiff("grad: node is a constant".into()));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            self.backward_one(node, &g, &mut grads);
            // keep the gradient if someone asked for this node
            if wrt.iter().any(|w| w.0 == idx) {
                grads[idx] = Some(g);
            }
        }
        wrt.iter()
            .map(|w| {
                let shape = self.shape(*w);
                let data = grads[w.0].clone().unwrap_or_else(|| vec![0.0; shape.len()]);
                Tensor::new(shape, data)
            })
            .collect()
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: Vec<f64>) {
        match &mut grads[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot => *slot = Some(contrib),
        }
    }

    fn backward_one(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add => {
                Self::accumulate(grads, node.inputs[0], g.to_vec());
                Self::accumulate(grads, node.inputs[1], g.to_vec());
            }
            Op::Sub => {
                Self::accumulate(grads, node.inputs[0], g.to_vec());
                Self::accumulate(grads, node.inputs[1], g.iter().map(|v| -v).collect());
            }
            Op::Neg => {
                Self::accumulate(grads, node.inputs[0], g.iter().map(|v| -v).collect());
            }
            Op::ScalarMul(s) => {
                Self::accumulate(grads, node.inputs[0], g.iter().map(|v| v * s).collect());
            }
            Op::AddConst => {
                Self::accumulate(grads, node.inputs[0], g.to_vec());
            }
            Op::Mul => {
                let a = &self.nodes[node.inputs[0].0].value.data;
                let b = &self.nodes[node.inputs[1].0].value.data;
                Self::accumulate(grads, node.inputs[0], zip_map(g, b, |gv, bv| gv * bv));
                Self::accumulate(grads, node.inputs[1], zip_map(g, a, |gv, av| gv * av));
            }
            Op::Div => {
                let a = &self.nodes[node.inputs[0].0].value.data;
                let b = &self.nodes[node.inputs[1].0].value.data;
                Self::accumulate(grads, node.inputs[0], zip_map(g, b, |gv, bv| gv / bv));
                let gb: Vec<f64> = g
                    .iter()
                    .zip(a.iter().zip(b))
                    .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                    .collect();
                Self::accumulate(grads, node.inputs[1], gb);
            }
            Op::ChannelMix { co, ci } => {
                let (_, ny, nx) = match self.nodes[node.inputs[0].0].value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let n = ny * nx;
                let xv = &self.nodes[node.inputs[0].0].value.data;
                let wv = &self.nodes[node.inputs[1].0].value.data;
                let mut gx = vec![0.0; ci * n];
                let mut gw = vec![0.0; co * ci];
                for o in 0..*co {
                    let go = &g[o * n..(o + 1) * n];
                    for i in 0..*ci {
                        let w_oi = wv[o * ci + i];
                        let xi = &xv[i * n..(i + 1) * n];
                        let gxi = &mut gx[i * n..(i + 1) * n];
                        let mut acc = 0.0;
                        for p in 0..n {
                            gxi[p] += w_oi * go[p];
                            acc += go[p] * xi[p];
                        }
                        gw[o * ci + i] += acc;
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
                Self::accumulate(grads, node.inputs[1], gw);
            }
            Op::MatVec { out, inp } => {
                let wv = &self.nodes[node.inputs[0].0].value.data;
                let vv = &self.nodes[node.inputs[1].0].value.data;
                let mut gw = vec![0.0; out * inp];
                let mut gv = vec![0.0; *inp];
                for o in 0..*out {
                    for i in 0..*inp {
                        gw[o * inp + i] += g[o] * vv[i];
                        gv[i] += g[o] * wv[o * inp + i];
                    }
                }
                Self::accumulate(grads, node.inputs[0], gw);
                Self::accumulate(grads, node.inputs[1], gv);
            }
            Op::Fft2 => {
                // adjoint of the unitary forward transform: unitary inverse
                let (c2, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let c = c2 / 2;
                let n = ny * nx;
                let scale = (n as f64).sqrt();
                let mut gx = vec![0.0; c * n];
                let mut buf = vec![Complex64::default(); n];
                for ch in 0..c {
                    for p in 0..n {
                        buf[p] = Complex64::new(g[ch * n + p], g[(c + ch) * n + p]);
                    }
                    let mut b = buf.clone();
                    fft::ifft2(&mut b, ny, nx);
                    for p in 0..n {
                        gx[ch * n + p] = b[p].re * scale;
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::Ifft2Real => {
                let (c, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let n = ny * nx;
                let scale = 1.0 / (n as f64).sqrt();
                let mut gz = vec![0.0; 2 * c * n];
                for ch in 0..c {
                    let spec = fft::fft2_real(&g[ch * n..(ch + 1) * n], ny, nx);
                    for (p, v) in spec.iter().enumerate() {
                        gz[ch * n + p] = v.re * scale;
                        gz[(c + ch) * n + p] = v.im * scale;
                    }
                }
                Self::accumulate(grads, node.inputs[0], gz);
            }
            Op::ModeTruncate(band) => {
                let (c, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let n = ny * nx;
                let mut keep = vec![false; n];
                for (iy, ix) in band.mode_indices(ny, nx) {
                    keep[iy * nx + ix] = true;
                }
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    for p in 0..n {
                        if keep[p] {
                            gx[ch * n + p] = g[ch * n + p];
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::SpectralConv { co, ci, band } => {
                let (_, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let n = ny * nx;
                let modes = band.mode_indices(ny, nx);
                let nm = modes.len();
                let half = co * ci * nm;
                let xv = &self.nodes[node.inputs[0].0].value.data;
                let wv = &self.nodes[node.inputs[1].0].value.data;
                let mut gx = vec![0.0; 2 * ci * n];
                let mut gw = vec![0.0; 2 * half];
                for (m, &(iy, ix)) in modes.iter().enumerate() {
                    let p = iy * nx + ix;
                    for o in 0..*co {
                        let (gr, gi) = (g[o * n + p], g[(co + o) * n + p]);
                        for i in 0..*ci {
                            let widx = (o * ci + i) * nm + m;
                            let (wr, wi) = (wv[widx], wv[half + widx]);
                            let (xr, xi) = (xv[i * n + p], xv[(ci + i) * n + p]);
                            gx[i * n + p] += wr * gr + wi * gi;
                            gx[(ci + i) * n + p] += -wi * gr + wr * gi;
                            gw[widx] += gr * xr + gi * xi;
                            gw[half + widx] += -gr * xi + gi * xr;
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
                Self::accumulate(grads, node.inputs[1], gw);
            }
            Op::FourierResample => {
                let (c, ty, tx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let (_, sy, sx) = match self.nodes[node.inputs[0].0].value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let _ = (ty, tx);
                let gx = fourier_resample_values(g, c, ty, tx, sy, sx, true);
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::UpsampleNearest(factor) => {
                let (c, ty, tx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let (ny, nx) = (ty / factor, tx / factor);
                let mut gx = vec![0.0; c * ny * nx];
                for ch in 0..c {
                    for i in 0..ty {
                        for j in 0..tx {
                            gx[(ch * ny + i / factor) * nx + j / factor] += g[(ch * ty + i) * tx + j];
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::DownsampleNearest(factor) => {
                let (c, ty, tx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let (ny, nx) = (ty * factor, tx * factor);
                let mut gx = vec![0.0; c * ny * nx];
                for ch in 0..c {
                    for i in 0..ty {
                        for j in 0..tx {
                            gx[(ch * ny + i * factor) * nx + j * factor] += g[(ch * ty + i) * tx + j];
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::Gelu => {
                let x = &self.nodes[node.inputs[0].0].value.data;
                Self::accumulate(grads, node.inputs[0], zip_map(g, x, |gv, xv| gv * gelu_prime(xv)));
            }
            Op::GroupNorm { groups } => {
                let (c, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let n = ny * nx;
                let per = c / groups;
                let xv = &self.nodes[node.inputs[0].0].value.data;
                let sv = &self.nodes[node.inputs[1].0].value.data;
                let mut gx = vec![0.0; c * n];
                let mut gs = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for gi in 0..*groups {
                    let lo = gi * per * n;
                    let hi = (gi + 1) * per * n;
                    let m = (hi - lo) as f64;
                    let mean = xv[lo..hi].iter().sum::<f64>() / m;
                    let var = xv[lo..hi].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
                    let istd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                    // accumulate per-channel scale/shift grads and the two
                    // reduction terms of the normalization backward pass
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ch in gi * per..(gi + 1) * per {
                        for p in 0..n {
                            let idx = ch * n + p;
                            let xhat = (xv[idx] - mean) * istd;
                            let dxhat = g[idx] * sv[ch];
                            gs[ch] += g[idx] * xhat;
                            gb[ch] += g[idx];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    for ch in gi * per..(gi + 1) * per {
                        for p in 0..n {
                            let idx = ch * n + p;
                            let xhat = (xv[idx] - mean) * istd;
                            let dxhat = g[idx] * sv[ch];
                            gx[idx] = istd * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
                Self::accumulate(grads, node.inputs[1], gs);
                Self::accumulate(grads, node.inputs[2], gb);
            }
            Op::ChannelBias => {
                let (c, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let n = ny * nx;
                let mut gbias = vec![0.0; c];
                for ch in 0..c {
                    for p in 0..n {
                        gbias[ch] += g[ch * n + p];
                    }
                }
                Self::accumulate(grads, node.inputs[0], g.to_vec());
                Self::accumulate(grads, node.inputs[1], gbias);
            }
            Op::ConcatChannels => {
                let na = self.nodes[node.inputs[0].0].value.data.len();
                Self::accumulate(grads, node.inputs[0], g[..na].to_vec());
                Self::accumulate(grads, node.inputs[1], g[na..].to_vec());
            }
            Op::SumReduce => {
                let len = self.nodes[node.inputs[0].0].value.data.len();
                Self::accumulate(grads, node.inputs[0], vec![g[0]; len]);
            }
            Op::SquaredL2 => {
                let x = &self.nodes[node.inputs[0].0].value.data;
                Self::accumulate(grads, node.inputs[0], x.iter().map(|v| 2.0 * v * g[0]).collect());
            }
            Op::HuberSum { delta } => {
                let x = &self.nodes[node.inputs[0].0].value.data;
                let gx = x
                    .iter()
                    .map(|&v| {
                        g[0] * if v.abs() <= *delta { v } else { delta * v.signum() }
                    })
                    .collect();
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::MaskedGather { indices } => {
                let len = self.nodes[node.inputs[0].0].value.data.len();
                let mut gx = vec![0.0; len];
                for (k, &i) in indices.iter().enumerate() {
                    gx[i] += g[k];
                }
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::Shift { dy, dx } => {
                let (c, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let gx = shift_values(g, c, ny, nx, -dy, -dx);
                Self::accumulate(grads, node.inputs[0], gx);
            }
            Op::ZeroBoundary => {
                let (c, ny, nx) = match node.value.shape {
                    Shape::Grid { channels, ny, nx } => (channels, ny, nx),
                    _ => unreachable!(),
                };
                let mut gx = g.to_vec();
                for ch in 0..c {
                    for i in 0..ny {
                        for j in 0..nx {
                            if i == 0 || j == 0 || i == ny - 1 || j == nx - 1 {
                                gx[(ch * ny + i) * nx + j] = 0.0;
                            }
                        }
                    }
                }
                Self::accumulate(grads, node.inputs[0], gx);
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn shift_values(xv: &[f64], c: usize, ny: usize, nx: usize, dy: i64, dx: i64) -> Vec<f64> {
    let mut out = vec![0.0; c * ny * nx];
    for ch in 0..c {
        for i in 0..ny as i64 {
            let si = i - dy;
            if si < 0 || si >= ny as i64 {
                continue;
            }
            for j in 0..nx as i64 {
                let sj = j - dx;
                if sj < 0 || sj >= nx as i64 {
                    continue;
                }
                out[(ch * ny + i as usize) * nx + j as usize] =
                    xv[(ch * ny + si as usize) * nx + sj as usize];
            }
        }
    }
    out
}

/// Value-preserving fourier resampling of a multi-channel buffer. With
/// `adjoint` set, applies the transpose of the forward map instead.
fn fourier_resample_values(
    xv: &[f64],
    c: usize,
    sy: usize,
    sx: usize,
    ty: usize,
    tx: usize,
    adjoint: bool,
) -> Vec<f64> {
    let sn = sy * sx;
    let tn = ty * tx;
    let mut out = vec![0.0; c * tn];
    for ch in 0..c {
        let spec = fft::fft2_real(&xv[ch * sn..(ch + 1) * sn], sy, sx);
        let remapped = if !adjoint {
            let scale = tn as f64 / sn as f64;
            fft::remap_spectrum(&spec, sy, sx, ty, tx, scale)
        } else {
            // transpose of the forward map from (ty,tx) to (sy,sx); the
            // forward's amplitude factor cancels against the asymmetric
            // FFT normalization, leaving unit scale.
            fft::remap_spectrum_adjoint(&spec, sy, sx, ty, tx, 1.0)
        };
        let vals = fft::ifft2_real(&remapped, ty, tx);
        out[ch * tn..(ch + 1) * tn].copy_from_slice(&vals);
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_prime(x: f64) -> f64 {
    let phi = (-(x * x) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * phi
}

/// Gradient of a scalar loss of the Darcy solution with respect to the
/// coefficient, via the implicit-function adjoint: one transposed (equal,
/// by symmetry) linear solve plus an assembly pass over the faces.
pub fn darcy_solve_adjoint(a: &Field, u: &Field, dl_du: &Field) -> Result<Field> {
    use crate::pde;
    // The Darcy FDM matrix is symmetric, so the adjoint solve reuses the
    // forward operator.
    let lambda = pde::solve_darcy_forcing(a, dl_du)?;
    let (ny, nx) = (a.grid.ny, a.grid.nx);
    let hx2 = ((nx - 1) as f64).powi(2);
    let hy2 = ((ny - 1) as f64).powi(2);
    let av = a.channel(0);
    let uv = u.channel(0);
    let lv = lambda.channel(0);
    let mut grad = vec![0.0; ny * nx];
    // lambda^T A(a) u = sum over faces h(a_p, a_q) (u_p - u_q)(l_p - l_q) / h^2;
    // dL/da_r = -d/da_r of that sum.
    let face = |p: usize, q: usize, w: f64, grad: &mut [f64]| {
        let (ap, aq) = (av[p], av[q]);
        let du = uv[p] - uv[q];
        let dl = lv[p] - lv[q];
        let denom = (ap + aq) * (ap + aq);
        let dh_dap = 2.0 * aq * aq / denom;
        let dh_daq = 2.0 * ap * ap / denom;
        grad[p] -= dh_dap * du * dl * w;
        grad[q] -= dh_daq * du * dl * w;
    };
    for i in 0..ny {
        for j in 0..nx {
            let p = i * nx + j;
            if j + 1 < nx {
                face(p, p + 1, hx2, &mut grad);
            }
            if i + 1 < ny {
                face(p, p + nx, hy2, &mut grad);
            }
        }
    }
    Field::new(a.grid, 1, grad)
}

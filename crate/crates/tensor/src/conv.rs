//! Convolution, transposed convolution and pooling kernels on raw slices.
//!
//! Convolutions are lowered to im2col + GEMM per batch item, group and band
//! of output rows. The backward kernels recompute the column buffer instead
//! of keeping it alive, which trades a second im2col for a much smaller tape.

use std::ops::Range;

use crate::element::Element;
use crate::error::{Result, TensorError};

/// How out-of-range input coordinates are filled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Mirror without repeating the edge sample (`[2 1 | 0 1 2 | 1 0]`).
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    /// `groups == in_channels` selects a depthwise convolution.
    pub groups: usize,
    pub pad_mode: PadMode,
    /// Extra rows/cols appended to a transposed convolution's output.
    pub output_padding: usize,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" zero padding for odd kernels.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            pad_mode: PadMode::Zeros,
            output_padding: 0,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }

    /// Depthwise convolution over `channels` channels.
    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel).with_groups(channels)
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.out_channels == self.in_channels
    }

    pub fn validate(&self, op: &'static str) -> Result<()> {
        if self.groups == 0 {
            return Err(TensorError::config(op, "groups must be positive"));
        }
        if self.stride == 0 {
            return Err(TensorError::config(op, "stride must be positive"));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(TensorError::config(op, "kernel dims must be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(TensorError::config(op, "channel counts must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(TensorError::config(
                op,
                format!(
                    "in_channels {} and out_channels {} must both be divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// Weight shape for a regular convolution: `Cout × Cin/groups × kh × kw`.
    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups.max(1),
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Weight shape for a transposed convolution: `Cin × Cout × kh × kw`.
    pub fn transposed_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel_h, self.kernel_w]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// `(H + 2p − kh) / stride + 1`.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(TensorError::dim(
                "conv2d",
                format!(
                    "padded input {ph}×{pw} (H×W) is smaller than kernel {}×{}",
                    self.kernel_h, self.kernel_w
                ),
            ));
        }
        if self.pad_mode == PadMode::Reflect && (self.padding >= h || self.padding >= w) {
            return Err(TensorError::dim(
                "conv2d",
                format!("reflect padding {} needs H and W above it, got {h}×{w}", self.padding),
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// `(H − 1)·stride − 2p + kh + output_padding`.
    pub fn transposed_output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.output_padding >= self.stride {
            return Err(TensorError::config(
                "conv_transpose2d",
                format!(
                    "output_padding {} must be below stride {}",
                    self.output_padding, self.stride
                ),
            ));
        }
        let size = |n: usize, k: usize| -> Result<usize> {
            let full = (n as i64 - 1) * self.stride as i64 + k as i64 + self.output_padding as i64;
            let out = full - 2 * self.padding as i64;
            if out <= 0 {
                Err(TensorError::config(
                    "conv_transpose2d",
                    format!("computed output size {out} is not positive"),
                ))
            } else {
                Ok(out as usize)
            }
        };
        Ok((size(h, self.kernel_h)?, size(w, self.kernel_w)?))
    }
}

/// Map a possibly out-of-range coordinate onto `[0, n)`.
pub(crate) fn pad_index(i: i64, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as i64;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zeros => None,
        PadMode::Reflect => Some(reflect_index(i, n as usize)),
    }
}

pub(crate) fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as i64 {
        r = period - r;
    }
    r as usize
}

/// Sliding-window geometry of one (group of) channel planes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn index_table(&self, k: usize, out: usize, n: usize) -> Vec<Option<usize>> {
        (0..out)
            .map(|o| pad_index((o * self.stride + k) as i64 - self.pad as i64, n, self.mode))
            .collect()
    }

    /// A 1×1, stride-1, unpadded window: im2col is the identity.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output rows per band, sized so a band's column buffer stays cache-sized.
    fn band_rows(&self) -> usize {
        const TARGET: usize = 1 << 17;
        (TARGET / (self.rows() * self.ow).max(1)).clamp(1, self.oh)
    }

    fn bands(&self, band_rows: usize) -> impl Iterator<Item = Range<usize>> + '_ {
        (0..self.oh)
            .step_by(band_rows)
            .map(move |start| start..(start + band_rows).min(self.oh))
    }

    /// Output columns `lo..hi` whose source column `o + kj - pad` is in range,
    /// for stride 1 only; these can be copied as one contiguous slice.
    fn interior(&self, kj: usize) -> (usize, usize) {
        if self.stride != 1 {
            return (0, 0);
        }
        let shift = kj as i64 - self.pad as i64;
        let lo = (-shift).clamp(0, self.ow as i64) as usize;
        let hi = (self.w as i64 - shift).clamp(lo as i64, self.ow as i64) as usize;
        (lo, hi)
    }
}

/// Gather input patches for output rows `band` into a
/// `rows × (band.len() · ow)` column matrix.
pub(crate) fn im2col<T: Element>(x: &[T], g: &Geometry, band: Range<usize>, col: &mut [T]) {
    let cols = band.len() * g.ow;
    let plane = g.h * g.w;
    for ki in 0..g.kh {
        let ys = &g.index_table(ki, g.oh, g.h)[band.clone()];
        for kj in 0..g.kw {
            let xs = g.index_table(kj, g.ow, g.w);
            let (lo, hi) = g.interior(kj);
            let shift = kj as i64 - g.pad as i64;
            for c in 0..g.channels {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let src = &x[c * plane..(c + 1) * plane];
                for (oy, iy) in ys.iter().enumerate() {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    let Some(iy) = iy else {
                        line.fill(T::zero());
                        continue;
                    };
                    let srow = &src[iy * g.w..(iy + 1) * g.w];
                    if hi > lo {
                        let s0 = (lo as i64 + shift) as usize;
                        line[lo..hi].copy_from_slice(&srow[s0..s0 + hi - lo]);
                    }
                    for ox in (0..lo).chain(hi.max(lo)..g.ow) {
                        line[ox] = match xs[ox] {
                            Some(ix) => srow[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a band's column matrix back onto the input planes (adjoint
/// of [`im2col`]).
pub(crate) fn col2im<T: Element>(col: &[T], g: &Geometry, band: Range<usize>, x: &mut [T]) {
    let cols = band.len() * g.ow;
    let plane = g.h * g.w;
    for ki in 0..g.kh {
        let ys = &g.index_table(ki, g.oh, g.h)[band.clone()];
        for kj in 0..g.kw {
            let xs = g.index_table(kj, g.ow, g.w);
            let (lo, hi) = g.interior(kj);
            let shift = kj as i64 - g.pad as i64;
            for c in 0..g.channels {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                let dst = &mut x[c * plane..(c + 1) * plane];
                for (oy, iy) in ys.iter().enumerate() {
                    let Some(iy) = iy else { continue };
                    let line = &src[oy * g.ow..(oy + 1) * g.ow];
                    let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                    if hi > lo {
                        let s0 = (lo as i64 + shift) as usize;
                        for (d, v) in drow[s0..s0 + hi - lo].iter_mut().zip(&line[lo..hi]) {
                            *d += *v;
                        }
                    }
                    for ox in (0..lo).chain(hi.max(lo)..g.ow) {
                        if let Some(ix) = xs[ox] {
                            drow[ix] += line[ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvShapes {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvShapes {
    fn group_geometry(&self, spec: &ConvSpec) -> Geometry {
        Geometry {
            channels: spec.in_channels / spec.groups,
            h: self.h,
            w: self.w,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            pad: spec.padding,
            mode: spec.pad_mode,
            oh: self.oh,
            ow: self.ow,
        }
    }

    /// Geometry of the regular convolution whose adjoint a transposed
    /// convolution computes: it maps the `oh × ow` output back to `h × w`.
    fn transposed_geometry(&self, spec: &ConvSpec) -> Geometry {
        Geometry {
            channels: spec.out_channels,
            h: self.oh,
            w: self.ow,
            kh: spec.kernel_h,
            kw: spec.kernel_w,
            stride: spec.stride,
            pad: spec.padding,
            mode: PadMode::Zeros,
            oh: self.h,
            ow: self.w,
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    s: &ConvShapes,
) -> Vec<T> {
    let g = s.group_geometry(spec);
    let (rows, cols) = (g.rows(), g.cols());
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let in_plane = s.h * s.w;
    let band_rows = g.band_rows();
    let mut out = vec![T::zero(); s.batch * spec.out_channels * cols];
    let mut col = vec![T::zero(); rows * band_rows * g.ow];
    for b in 0..s.batch {
        for grp in 0..spec.groups {
            let xin = &x[(b * spec.in_channels + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let w = &weight[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let o = &mut out[(b * spec.out_channels + grp * cout_g) * cols..][..cout_g * cols];
            if g.is_pointwise() {
                // The column matrix is the input itself.
                T::gemm(cout_g, rows, cols, T::one(), w, rows, 1, xin, in_plane, 1, T::zero(), o, cols, 1);
                continue;
            }
            for band in g.bands(band_rows) {
                let bc = band.len() * g.ow;
                let off = band.start * g.ow;
                im2col(xin, &g, band, &mut col[..rows * bc]);
                T::gemm(cout_g, rows, bc, T::one(), w, rows, 1, &col[..rows * bc], bc, 1, T::zero(), &mut o[off..], cols, 1);
            }
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                let o = &mut out[(b * spec.out_channels + c) * cols..][..cols];
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    spec: &ConvSpec,
    s: &ConvShapes,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let g = s.group_geometry(spec);
    let (rows, cols) = (g.rows(), g.cols());
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let in_plane = s.h * s.w;
    let fast_dx = need_input && spec.stride == 1;
    let mut dx = (need_input && !fast_dx).then(|| vec![T::zero(); x.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let band_rows = g.band_rows();
    let mut col = vec![T::zero(); rows * band_rows * g.ow];
    let mut col_t = if need_weight { col.clone() } else { Vec::new() };
    for b in 0..s.batch {
        for grp in 0..spec.groups {
            let go = &grad_out[(b * spec.out_channels + grp * cout_g) * cols..][..cout_g * cols];
            let w = &weight[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let x_off = (b * spec.in_channels + grp * cin_g) * in_plane;
            for band in g.bands(band_rows) {
                let bc = band.len() * g.ow;
                let go_band = &go[band.start * g.ow..];
                let col = &mut col[..rows * bc];
                if let Some(dw) = dw.as_mut() {
                    im2col(&x[x_off..x_off + cin_g * in_plane], &g, band.clone(), col);
                    let col_t = &mut col_t[..rows * bc];
                    transpose_into(col, rows, bc, col_t);
                    let dwg = &mut dw[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                    // dW += dOut · colᵀ
                    T::gemm(cout_g, bc, rows, T::one(), go_band, cols, 1, col_t, rows, 1, T::one(), dwg, rows, 1);
                }
                if let Some(dx) = dx.as_mut() {
                    // dcol = Wᵀ · dOut
                    T::gemm(rows, cout_g, bc, T::one(), w, 1, rows, go_band, cols, 1, T::zero(), col, bc, 1);
                    col2im(col, &g, band, &mut dx[x_off..x_off + cin_g * in_plane]);
                }
            }
        }
    }
    if fast_dx {
        dx = Some(input_grad_stride1(weight, grad_out, spec, s));
    }
    let db = need_bias.then(|| channel_sums(grad_out, s.batch, spec.out_channels, cols));
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Input gradient of a stride-1 convolution as a forward correlation of
/// the output gradient with the flipped, transposed kernel over the padded
/// input, followed by folding the padding border back onto the input.
fn input_grad_stride1<T: Element>(weight: &[T], grad_out: &[T], spec: &ConvSpec, s: &ConvShapes) -> Vec<T> {
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let mut flipped = vec![T::zero(); weight.len()];
    for grp in 0..spec.groups {
        for co in 0..cout_g {
            for ci in 0..cin_g {
                let src = &weight[((grp * cout_g + co) * cin_g + ci) * kh * kw..][..kh * kw];
                let dst = &mut flipped[((grp * cin_g + ci) * cout_g + co) * kh * kw..][..kh * kw];
                for a in 0..kh {
                    for b in 0..kw {
                        dst[a * kw + b] = src[(kh - 1 - a) * kw + (kw - 1 - b)];
                    }
                }
            }
        }
    }
    let (ph, pw) = (s.h + 2 * spec.padding, s.w + 2 * spec.padding);
    let adjoint = ConvSpec {
        in_channels: spec.out_channels,
        out_channels: spec.in_channels,
        kernel_h: kh,
        kernel_w: kw,
        stride: 1,
        padding: 0,
        groups: spec.groups,
        pad_mode: PadMode::Zeros,
        output_padding: 0,
    };
    // Pad the output gradient by k − 1 on each side so the valid
    // correlation covers the whole padded input.
    let (gh, gw) = (s.oh + 2 * (kh - 1), s.ow + 2 * (kw - 1));
    let mut gpad = vec![T::zero(); s.batch * spec.out_channels * gh * gw];
    for plane in 0..s.batch * spec.out_channels {
        for y in 0..s.oh {
            let src = &grad_out[(plane * s.oh + y) * s.ow..][..s.ow];
            gpad[(plane * gh + y + kh - 1) * gw + kw - 1..][..s.ow].copy_from_slice(src);
        }
    }
    let shapes = ConvShapes {
        batch: s.batch,
        h: gh,
        w: gw,
        oh: gh - kh + 1,
        ow: gw - kw + 1,
    };
    debug_assert_eq!((shapes.oh, shapes.ow), (ph, pw));
    let padded = conv2d_forward(&gpad, &flipped, None, &adjoint, &shapes);
    let ys: Vec<Option<usize>> = (0..ph)
        .map(|y| pad_index(y as i64 - spec.padding as i64, s.h, spec.pad_mode))
        .collect();
    let xs: Vec<Option<usize>> = (0..pw)
        .map(|x| pad_index(x as i64 - spec.padding as i64, s.w, spec.pad_mode))
        .collect();
    let mut dx = vec![T::zero(); s.batch * spec.in_channels * s.h * s.w];
    for plane in 0..s.batch * spec.in_channels {
        let src = &padded[plane * ph * pw..][..ph * pw];
        let dst = &mut dx[plane * s.h * s.w..][..s.h * s.w];
        for (py, iy) in ys.iter().enumerate() {
            let Some(iy) = iy else { continue };
            let srow = &src[py * pw..][..pw];
            let drow = &mut dst[iy * s.w..][..s.w];
            let p = spec.padding;
            for (d, v) in drow.iter_mut().zip(&srow[p..p + s.w]) {
                *d += *v;
            }
            for px in (0..p).chain(p + s.w..pw) {
                if let Some(ix) = xs[px] {
                    drow[ix] += srow[px];
                }
            }
        }
    }
    dx
}

/// Writes the transpose of the row-major `rows × cols` matrix `src` into
/// `dst`. Packing strided operands is several times slower than packing
/// contiguous ones, so GEMM inputs are transposed up front instead.
fn transpose_into<T: Element>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

fn channel_sums<T: Element>(g: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            *o += g[(b * channels + c) * plane..][..plane].iter().copied().sum::<T>();
        }
    }
    out
}

/// `x` is `B × Cin × h × w`, `weight` is `Cin × Cout × kh × kw`; returns
/// `B × Cout × oh × ow`.
pub(crate) fn conv_transpose2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    spec: &ConvSpec,
    s: &ConvShapes,
) -> Vec<T> {
    let g = s.transposed_geometry(spec);
    let (rows, cols) = (g.rows(), g.cols());
    let out_plane = s.oh * s.ow;
    let mut out = vec![T::zero(); s.batch * spec.out_channels * out_plane];
    let mut col = vec![T::zero(); rows * cols];
    for b in 0..s.batch {
        let xb = &x[b * spec.in_channels * cols..][..spec.in_channels * cols];
        // col = Wᵀ · x_b, W viewed as Cin × rows
        T::gemm(rows, spec.in_channels, cols, T::one(), weight, 1, rows, xb, cols, 1, T::zero(), &mut col, cols, 1);
        let ob = &mut out[b * spec.out_channels * out_plane..][..spec.out_channels * out_plane];
        col2im(&col, &g, 0..g.oh, ob);
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                ob[c * out_plane..(c + 1) * out_plane]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    spec: &ConvSpec,
    s: &ConvShapes,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let g = s.transposed_geometry(spec);
    let (rows, cols) = (g.rows(), g.cols());
    let out_plane = s.oh * s.ow;
    let mut dx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut col = vec![T::zero(); rows * cols];
    let mut col_t = if need_weight { col.clone() } else { Vec::new() };
    for b in 0..s.batch {
        let gob = &grad_out[b * spec.out_channels * out_plane..][..spec.out_channels * out_plane];
        im2col(gob, &g, 0..g.oh, &mut col);
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * spec.in_channels * cols..][..spec.in_channels * cols];
            T::gemm(spec.in_channels, rows, cols, T::one(), weight, rows, 1, &col, cols, 1, T::zero(), dxb, cols, 1);
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * spec.in_channels * cols..][..spec.in_channels * cols];
            transpose_into(&col, rows, cols, &mut col_t);
            T::gemm(spec.in_channels, cols, rows, T::one(), xb, cols, 1, &col_t, rows, 1, T::one(), dw, rows, 1);
        }
    }
    let db = need_bias.then(|| channel_sums(grad_out, s.batch, spec.out_channels, out_plane));
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Pooling window `k` with reflect-padding at the bottom/right edges up to
/// the next multiple of `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeometry {
    pub fn new(k: usize, h: usize, w: usize) -> Self {
        Self {
            k,
            h,
            w,
            oh: h.div_ceil(k),
            ow: w.div_ceil(k),
        }
    }
}

pub(crate) fn avg_pool_forward<T: Element>(x: &[T], planes: usize, g: &PoolGeometry) -> Vec<T> {
    let inv = T::from_f64(1.0 / (g.k * g.k) as f64);
    let mut out = vec![T::zero(); planes * g.oh * g.ow];
    for p in 0..planes {
        let src = &x[p * g.h * g.w..][..g.h * g.w];
        let dst = &mut out[p * g.oh * g.ow..][..g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for dy in 0..g.k {
                    let iy = reflect_index((oy * g.k + dy) as i64, g.h);
                    for dx in 0..g.k {
                        let ix = reflect_index((ox * g.k + dx) as i64, g.w);
                        acc += src[iy * g.w + ix];
                    }
                }
                dst[oy * g.ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward<T: Element>(grad_out: &[T], planes: usize, g: &PoolGeometry) -> Vec<T> {
    let inv = T::from_f64(1.0 / (g.k * g.k) as f64);
    let mut dx = vec![T::zero(); planes * g.h * g.w];
    for p in 0..planes {
        let src = &grad_out[p * g.oh * g.ow..][..g.oh * g.ow];
        let dst = &mut dx[p * g.h * g.w..][..g.h * g.w];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let v = src[oy * g.ow + ox] * inv;
                for dy in 0..g.k {
                    let iy = reflect_index((oy * g.k + dy) as i64, g.h);
                    for dx_ in 0..g.k {
                        let ix = reflect_index((ox * g.k + dx_) as i64, g.w);
                        dst[iy * g.w + ix] += v;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_folds_both_sides() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(5, 1), 0);
    }

    #[test]
    fn output_size_formula() {
        let spec = ConvSpec::new(1, 1, 3).with_padding(0);
        assert_eq!(spec.output_hw(5, 7).unwrap(), (3, 5));
        let strided = ConvSpec::new(1, 1, 3).with_stride(2);
        assert_eq!(strided.output_hw(8, 8).unwrap(), (4, 4));
        assert!(ConvSpec::new(1, 1, 5).with_padding(0).output_hw(3, 3).is_err());
    }

    #[test]
    fn transposed_size_formula() {
        let spec = ConvSpec::new(1, 1, 2).with_stride(2).with_padding(0);
        assert_eq!(spec.transposed_output_hw(2, 2).unwrap(), (4, 4));
        let fsrcnn = ConvSpec::new(56, 1, 9)
            .with_stride(3)
            .with_padding(4)
            .with_output_padding(2);
        assert_eq!(fsrcnn.transposed_output_hw(10, 7).unwrap(), (30, 21));
        let bad = ConvSpec::new(1, 1, 1).with_stride(1).with_padding(3);
        assert!(matches!(
            bad.transposed_output_hw(2, 2),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn group_divisibility() {
        assert!(ConvSpec::new(4, 6, 3).with_groups(2).validate("t").is_ok());
        assert!(matches!(
            ConvSpec::new(4, 6, 3).with_groups(4).validate("t"),
            Err(TensorError::Config { .. })
        ));
        assert!(ConvSpec::depthwise(8, 3).is_depthwise());
    }
}

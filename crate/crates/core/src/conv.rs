//! Convolution kernels on plain tensors (no autograd).
//!
//! Cross-correlation convention with zero padding. Both directions are lowered
//! to `im2col` plus a single GEMM over the whole batch; the transposed
//! convolution is the exact adjoint of `conv2d` with the same kernel.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Spatial output size of a strided convolution.
pub fn conv2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidArgument(
            "kernel and stride must be positive".into(),
        ));
    }
    if kernel > input + 2 * padding {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {kernel} exceeds padded input {}",
                input + 2 * padding
            ),
        ));
    }
    Ok((input + 2 * padding - kernel) / stride + 1)
}

/// Spatial output size of a transposed convolution.
pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return Err(Error::InvalidArgument(
            "input, kernel and stride must be positive".into(),
        ));
    }
    if output_padding >= stride {
        return Err(Error::InvalidArgument(format!(
            "output_padding {output_padding} must be smaller than stride {stride}"
        )));
    }
    let full = (input - 1) * stride + kernel + output_padding;
    if full <= 2 * padding {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("padding {padding} consumes the whole output"),
        ));
    }
    Ok(full - 2 * padding)
}

/// Geometry shared by `im2col` and `col2im`: an image of `channels × height × width`
/// scanned by a `kernel × kernel` window onto a `grid_h × grid_w` lattice.
#[derive(Debug, Clone, Copy)]
struct Patches {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    grid_h: usize,
    grid_w: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.batch * self.grid_h * self.grid_w
    }

    /// Input coordinate touched by grid position `o` and kernel tap `t`.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    fn im2col<T: Element>(&self, image: &[T]) -> Vec<T> {
        let (k, gh, gw) = (self.kernel, self.grid_h, self.grid_w);
        let plane = self.height * self.width;
        let cols = self.cols();
        let mut col = vec![T::zero(); self.rows() * cols];
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst_row = &mut col[row * cols..(row + 1) * cols];
                    for n in 0..self.batch {
                        let src = &image[(n * self.channels + c) * plane..][..plane];
                        for oh in 0..gh {
                            let Some(ih) = self.source(oh, ki, self.height) else {
                                continue;
                            };
                            let dst = &mut dst_row[(n * gh + oh) * gw..][..gw];
                            let src_row = &src[ih * self.width..][..self.width];
                            for (ow, d) in dst.iter_mut().enumerate() {
                                if let Some(iw) = self.source(ow, kj, self.width) {
                                    *d = src_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Element>(&self, col: &[T]) -> Vec<T> {
        let (k, gh, gw) = (self.kernel, self.grid_h, self.grid_w);
        let plane = self.height * self.width;
        let cols = self.cols();
        let mut image = vec![T::zero(); self.batch * self.channels * plane];
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src_row = &col[row * cols..(row + 1) * cols];
                    for n in 0..self.batch {
                        let dst = &mut image[(n * self.channels + c) * plane..][..plane];
                        for oh in 0..gh {
                            let Some(ih) = self.source(oh, ki, self.height) else {
                                continue;
                            };
                            let src = &src_row[(n * gh + oh) * gw..][..gw];
                            let dst_row = &mut dst[ih * self.width..][..self.width];
                            for (ow, &v) in src.iter().enumerate() {
                                if let Some(iw) = self.source(ow, kj, self.width) {
                                    dst_row[iw] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        image
    }
}

/// `[N, C, H, W]` → `[C, N·H·W]`.
fn to_channel_major<T: Element>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * plane..][..plane]
                .copy_from_slice(&data[(b * c + ch) * plane..][..plane]);
        }
    }
    out
}

/// `[C, N·H·W]` → `[N, C, H, W]`.
fn from_channel_major<T: Element>(data: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * plane..][..plane]
                .copy_from_slice(&data[(ch * n + b) * plane..][..plane]);
        }
    }
    out
}

fn add_bias<T: Element>(data: &mut [T], bias: &[T], n: usize, plane: usize) {
    let c = bias.len();
    for b in 0..n {
        for (ch, &bv) in bias.iter().enumerate() {
            for v in &mut data[(b * c + ch) * plane..][..plane] {
                *v += bv;
            }
        }
    }
}

fn bias_grad<T: Element>(grad_out: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for b in 0..n {
        for (ch, o) in out.iter_mut().enumerate() {
            *o += grad_out[(b * c + ch) * plane..][..plane]
                .iter()
                .copied()
                .sum::<T>();
        }
    }
    out
}

fn check_bias<T: Element>(
    bias: Option<&Tensor<T>>,
    channels: usize,
    op: &'static str,
) -> Result<()> {
    match bias {
        Some(b) if b.shape() != [channels] => Err(Error::shape(
            op,
            format!("bias shape {:?}, expected [{channels}]", b.shape()),
        )),
        _ => Ok(()),
    }
}

fn square_kernel<T: Element>(w: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match w.shape() {
        &[a, b, kh, kw] if kh == kw => Ok((a, b, kh)),
        s => Err(Error::shape(
            op,
            format!("expected a square 4-D kernel, got {s:?}"),
        )),
    }
}

fn conv2d_patches<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(Patches, usize)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (cout, wcin, k) = square_kernel(w, "conv2d")?;
    if cin != wcin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {wcin}"),
        ));
    }
    let grid_h = conv2d_output_size(h, k, stride, padding)?;
    let grid_w = conv2d_output_size(wd, k, stride, padding)?;
    let patches = Patches {
        batch: n,
        channels: cin,
        height: h,
        width: wd,
        kernel: k,
        stride,
        padding,
        grid_h,
        grid_w,
    };
    Ok((patches, cout))
}

/// 2-D cross-correlation. `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (p, cout) = conv2d_patches(x, w, stride, padding)?;
    check_bias(bias, cout, "conv2d")?;
    let col = p.im2col(x.data());
    let (kdim, l) = (p.rows(), p.cols());
    let mut out_cm = vec![T::zero(); cout * l];
    T::gemm(
        cout,
        kdim,
        l,
        w.data(),
        (kdim as isize, 1),
        &col,
        (l as isize, 1),
        &mut out_cm,
        false,
    );
    let plane = p.grid_h * p.grid_w;
    let mut out = from_channel_major(&out_cm, p.batch, cout, plane);
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), p.batch, plane);
    }
    Tensor::new([p.batch, cout, p.grid_h, p.grid_w], out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias (each only if requested).
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (p, cout) = conv2d_patches(x, w, stride, padding)?;
    let (kdim, l) = (p.rows(), p.cols());
    let plane = p.grid_h * p.grid_w;
    let g_cm = to_channel_major(grad_out.data(), p.batch, cout, plane);

    let gx = if need[0] {
        let mut gcol = vec![T::zero(); kdim * l];
        T::gemm(
            kdim,
            cout,
            l,
            w.data(),
            (1, kdim as isize),
            &g_cm,
            (l as isize, 1),
            &mut gcol,
            false,
        );
        Some(Tensor::new(x.shape(), p.col2im(&gcol))?)
    } else {
        None
    };
    let gw = if need[1] {
        let col = p.im2col(x.data());
        let mut gw = vec![T::zero(); cout * kdim];
        T::gemm(
            cout,
            l,
            kdim,
            &g_cm,
            (l as isize, 1),
            &col,
            (1, l as isize),
            &mut gw,
            false,
        );
        Some(Tensor::new(w.shape(), gw)?)
    } else {
        None
    };
    let gb = need[2]
        .then(|| Tensor::new([cout], bias_grad(grad_out.data(), p.batch, cout, plane)))
        .transpose()?;
    Ok((gx, gw, gb))
}

fn conv_transpose2d_patches<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<(Patches, usize)> {
    let (n, cin, h, wd) = x.dims4()?;
    let (wcin, cout, k) = square_kernel(w, "conv_transpose2d")?;
    if cin != wcin {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input has {cin} channels, kernel expects {wcin}"),
        ));
    }
    let out_h = conv_transpose2d_output_size(h, k, stride, padding, output_padding)?;
    let out_w = conv_transpose2d_output_size(wd, k, stride, padding, output_padding)?;
    let patches = Patches {
        batch: n,
        channels: cout,
        height: out_h,
        width: out_w,
        kernel: k,
        stride,
        padding,
        grid_h: h,
        grid_w: wd,
    };
    Ok((patches, cin))
}

/// Transposed 2-D convolution. `x: [N, Cin, H, W]`, `w: [Cin, Cout, k, k]`,
/// output side `(H−1)·stride − 2·padding + k + output_padding`.
pub fn conv_transpose2d<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let (p, cin) = conv_transpose2d_patches(x, w, stride, padding, output_padding)?;
    check_bias(bias, p.channels, "conv_transpose2d")?;
    let (kdim, l) = (p.rows(), p.cols());
    let x_cm = to_channel_major(x.data(), p.batch, cin, p.grid_h * p.grid_w);
    let mut col = vec![T::zero(); kdim * l];
    T::gemm(
        kdim,
        cin,
        l,
        w.data(),
        (1, kdim as isize),
        &x_cm,
        (l as isize, 1),
        &mut col,
        false,
    );
    let mut out = p.col2im(&col);
    if let Some(b) = bias {
        add_bias(&mut out, b.data(), p.batch, p.height * p.width);
    }
    Tensor::new([p.batch, p.channels, p.height, p.width], out)
}

/// Gradients of [`conv_transpose2d`] w.r.t. input, kernel and bias.
#[allow(clippy::type_complexity, clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
    need: [bool; 3],
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (p, cin) = conv_transpose2d_patches(x, w, stride, padding, output_padding)?;
    let (kdim, l) = (p.rows(), p.cols());
    let in_plane = p.grid_h * p.grid_w;
    let gcol = p.im2col(grad_out.data());

    let gx = if need[0] {
        let mut gx_cm = vec![T::zero(); cin * l];
        T::gemm(
            cin,
            kdim,
            l,
            w.data(),
            (kdim as isize, 1),
            &gcol,
            (l as isize, 1),
            &mut gx_cm,
            false,
        );
        Some(Tensor::new(
            x.shape(),
            from_channel_major(&gx_cm, p.batch, cin, in_plane),
        )?)
    } else {
        None
    };
    let gw = if need[1] {
        let x_cm = to_channel_major(x.data(), p.batch, cin, in_plane);
        let mut gw = vec![T::zero(); cin * kdim];
        T::gemm(
            cin,
            l,
            kdim,
            &x_cm,
            (l as isize, 1),
            &gcol,
            (1, l as isize),
            &mut gw,
            false,
        );
        Some(Tensor::new(w.shape(), gw)?)
    } else {
        None
    };
    let gb = need[2]
        .then(|| {
            Tensor::new(
                [p.channels],
                bias_grad(grad_out.data(), p.batch, p.channels, p.height * p.width),
            )
        })
        .transpose()?;
    Ok((gx, gw, gb))
}

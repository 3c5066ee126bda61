//! 2-D convolution on CPU as im2col + GEMM.
//!
//! Three custom ops cover the forward pass, the input gradient (which is also
//! the transposed convolution) and the weight gradient. Each op's backward is
//! written in terms of the other two, so graphs through them can be
//! differentiated any number of times.

use candle_core::{CpuStorage, CustomOp2, Layout, Module, Shape, Tensor};
use candle_nn::{Init, VarBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    stride: usize,
    padding: usize,
    kh: usize,
    kw: usize,
}

impl Geometry {
    fn out_size(&self, h: usize, w: usize) -> candle_core::Result<(usize, usize)> {
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < self.kh || pw < self.kw {
            candle_core::bail!(
                "kernel {}x{} larger than padded input {ph}x{pw}",
                self.kh,
                self.kw
            );
        }
        Ok((
            (ph - self.kh) / self.stride + 1,
            (pw - self.kw) / self.stride + 1,
        ))
    }
}

trait Float: Copy + Default + std::ops::AddAssign + candle_core::WithDType {
    /// `c = a * b + beta * c` with arbitrary element strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Safe wrapper: `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`,
/// where `a` and `b` may be transposed views given by their strides.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Unfold one `C x H x W` image into a `(C*kh*kw) x (OH*OW)` column matrix.
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: Geometry,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let p = oh * ow;
    let pad = g.padding as isize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into a zeroed image.
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    g: Geometry,
    oh: usize,
    ow: usize,
    x: &mut [T],
) {
    let p = oh * ow;
    let pad = g.padding as isize;
    x.fill(T::zero());
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                let src = &cols[row..row + p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

fn slice<'a, T: Float>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv operands must be contiguous".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn dims4(l: &Layout, what: &str) -> candle_core::Result<(usize, usize, usize, usize)> {
    match l.dims() {
        &[a, b, c, d] => Ok((a, b, c, d)),
        other => candle_core::bail!("{what} must be rank 4, got {other:?}"),
    }
}

/// `(x: B x C x H x W, w: O x C x kh x kw) -> B x O x OH x OW`.
struct ConvFwd(Geometry);
/// `(dy: B x O x OH x OW, w: O x C x kh x kw) -> B x C x H x W`.
struct ConvInputGrad(Geometry, usize, usize);
/// `(x: B x C x H x W, dy: B x O x OH x OW) -> O x C x kh x kw`.
struct ConvWeightGrad(Geometry);

fn fwd_impl<T: Float>(
    g: Geometry,
    x: &[T],
    xl: &Layout,
    w: &[T],
    wl: &Layout,
) -> candle_core::Result<(Vec<T>, Shape)> {
    let (b, c, h, wd) = dims4(xl, "conv input")?;
    let (o, wc, kh, kw) = dims4(wl, "conv weight")?;
    if wc != c || kh != g.kh || kw != g.kw {
        candle_core::bail!(
            "conv weight {:?} does not fit input {:?}",
            wl.dims(),
            xl.dims()
        );
    }
    let (oh, ow) = g.out_size(h, wd)?;
    let (ck, p) = (c * kh * kw, oh * ow);
    let mut cols = vec![T::zero(); ck * p];
    let mut out = vec![T::zero(); b * o * p];
    for bi in 0..b {
        im2col(
            &x[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            g,
            oh,
            ow,
            &mut cols,
        );
        gemm(
            o,
            ck,
            p,
            w,
            (ck, 1),
            &cols,
            (p, 1),
            T::zero(),
            &mut out[bi * o * p..(bi + 1) * o * p],
        );
    }
    Ok((out, Shape::from((b, o, oh, ow))))
}

fn input_grad_impl<T: Float>(
    g: Geometry,
    h: usize,
    wd: usize,
    dy: &[T],
    dyl: &Layout,
    w: &[T],
    wl: &Layout,
) -> candle_core::Result<(Vec<T>, Shape)> {
    let (b, o, oh, ow) = dims4(dyl, "conv output gradient")?;
    let (wo, c, kh, kw) = dims4(wl, "conv weight")?;
    if wo != o || kh != g.kh || kw != g.kw || g.out_size(h, wd)? != (oh, ow) {
        candle_core::bail!(
            "conv weight {:?} does not fit gradient {:?}",
            wl.dims(),
            dyl.dims()
        );
    }
    let (ck, p) = (c * kh * kw, oh * ow);
    let mut cols = vec![T::zero(); ck * p];
    let mut out = vec![T::zero(); b * c * h * wd];
    for bi in 0..b {
        gemm(
            ck,
            o,
            p,
            w,
            (1, ck),
            &dy[bi * o * p..(bi + 1) * o * p],
            (p, 1),
            T::zero(),
            &mut cols,
        );
        col2im(
            &cols,
            c,
            h,
            wd,
            g,
            oh,
            ow,
            &mut out[bi * c * h * wd..(bi + 1) * c * h * wd],
        );
    }
    Ok((out, Shape::from((b, c, h, wd))))
}

fn weight_grad_impl<T: Float>(
    g: Geometry,
    x: &[T],
    xl: &Layout,
    dy: &[T],
    dyl: &Layout,
) -> candle_core::Result<(Vec<T>, Shape)> {
    let (b, c, h, wd) = dims4(xl, "conv input")?;
    let (db, o, oh, ow) = dims4(dyl, "conv output gradient")?;
    if db != b || g.out_size(h, wd)? != (oh, ow) {
        candle_core::bail!(
            "conv gradient {:?} does not fit input {:?}",
            dyl.dims(),
            xl.dims()
        );
    }
    let (ck, p) = (c * g.kh * g.kw, oh * ow);
    let mut cols = vec![T::zero(); ck * p];
    let mut out = vec![T::zero(); o * ck];
    for bi in 0..b {
        im2col(
            &x[bi * c * h * wd..(bi + 1) * c * h * wd],
            c,
            h,
            wd,
            g,
            oh,
            ow,
            &mut cols,
        );
        let beta = if bi == 0 { T::zero() } else { T::one() };
        gemm(
            o,
            p,
            ck,
            &dy[bi * o * p..(bi + 1) * o * p],
            (p, 1),
            &cols,
            (1, p),
            beta,
            &mut out,
        );
    }
    Ok((out, Shape::from((o, c, g.kh, g.kw))))
}

fn run<F32Fn, F64Fn>(
    s1: &CpuStorage,
    l1: &Layout,
    s2: &CpuStorage,
    l2: &Layout,
    f32_fn: F32Fn,
    f64_fn: F64Fn,
) -> candle_core::Result<(CpuStorage, Shape)>
where
    F32Fn: FnOnce(&[f32], &[f32]) -> candle_core::Result<(Vec<f32>, Shape)>,
    F64Fn: FnOnce(&[f64], &[f64]) -> candle_core::Result<(Vec<f64>, Shape)>,
{
    match (s1, s2) {
        (CpuStorage::F32(_), CpuStorage::F32(_)) => {
            let (v, s) = f32_fn(slice(s1, l1)?, slice(s2, l2)?)?;
            Ok((CpuStorage::F32(v), s))
        }
        (CpuStorage::F64(_), CpuStorage::F64(_)) => {
            let (v, s) = f64_fn(slice(s1, l1)?, slice(s2, l2)?)?;
            Ok((CpuStorage::F64(v), s))
        }
        _ => candle_core::bail!("conv supports matching f32 or f64 operands only"),
    }
}

impl CustomOp2 for ConvFwd {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        run(
            s1,
            l1,
            s2,
            l2,
            |x, w| fwd_impl(g, x, l1, w, l2),
            |x, w| fwd_impl(g, x, l1, w, l2),
        )
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let grad = grad.contiguous()?;
        let dx = tracked(x, || grad.apply_op2(w, ConvInputGrad(self.0, h, wd)))?;
        let dw = tracked(w, || x.apply_op2(&grad, ConvWeightGrad(self.0)))?;
        Ok((dx, dw))
    }
}

impl CustomOp2 for ConvInputGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (g, h, w) = (self.0, self.1, self.2);
        run(
            s1,
            l1,
            s2,
            l2,
            |dy, k| input_grad_impl(g, h, w, dy, l1, k, l2),
            |dy, k| input_grad_impl(g, h, w, dy, l1, k, l2),
        )
    }

    fn bwd(
        &self,
        dy: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let d_dy = tracked(dy, || grad.apply_op2(w, ConvFwd(self.0)))?;
        let d_w = tracked(w, || grad.apply_op2(dy, ConvWeightGrad(self.0)))?;
        Ok((d_dy, d_w))
    }
}

impl CustomOp2 for ConvWeightGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        run(
            s1,
            l1,
            s2,
            l2,
            |x, dy| weight_grad_impl(g, x, l1, dy, l2),
            |x, dy| weight_grad_impl(g, x, l1, dy, l2),
        )
    }

    fn bwd(
        &self,
        x: &Tensor,
        dy: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, wd) = x.dims4()?;
        let grad = grad.contiguous()?;
        let d_x = tracked(x, || dy.apply_op2(&grad, ConvInputGrad(self.0, h, wd)))?;
        let d_dy = tracked(dy, || x.apply_op2(&grad, ConvFwd(self.0)))?;
        Ok((d_x, d_dy))
    }
}

/// Gradients are only worth computing for operands the graph tracks.
pub(crate) fn tracked(
    operand: &Tensor,
    f: impl FnOnce() -> candle_core::Result<Tensor>,
) -> candle_core::Result<Option<Tensor>> {
    if operand.track_op() {
        f().map(Some)
    } else {
        Ok(None)
    }
}

fn geometry(w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Geometry> {
    let (_, _, kh, kw) = w.dims4()?;
    if stride == 0 {
        candle_core::bail!("conv stride must be positive");
    }
    Ok(Geometry {
        stride,
        padding,
        kh,
        kw,
    })
}

/// `x: B x C x H x W`, `w: O x C x kh x kw`.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let g = geometry(w, stride, padding)?;
    x.contiguous()?.apply_op2(&w.contiguous()?, ConvFwd(g))
}

/// `x: B x Cin x H x W`, `w: Cin x Cout x kh x kw`; output side is
/// `(H - 1) * stride - 2 * padding + kh`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let g = geometry(w, stride, padding)?;
    let (_, _, h, wd) = x.dims4()?;
    let side = |n: usize, k: usize| ((n - 1) * stride + k).checked_sub(2 * padding);
    let (Some(oh), Some(ow)) = (side(h, g.kh), side(wd, g.kw)) else {
        candle_core::bail!("transposed conv padding {padding} too large for {h}x{wd}");
    };
    x.contiguous()?
        .apply_op2(&w.contiguous()?, ConvInputGrad(g, oh, ow))
}

/// Convolution layer with optional bias, initialized like `candle_nn::conv2d`.
#[derive(Debug, Clone)]
pub struct Conv {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        let weight = vb.get_with_hints(
            (out_c, in_c, k, k),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let bias = if bias {
            let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
            Some(vb.get_with_hints(
                out_c,
                "bias",
                Init::Uniform {
                    lo: -bound,
                    up: bound,
                },
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

impl Module for Conv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution layer, weight `Cin x Cout x k x k`.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose {
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        let weight = vb.get_with_hints(
            (in_c, out_c, k, k),
            "weight",
            candle_nn::init::DEFAULT_KAIMING_NORMAL,
        )?;
        let bias = if bias {
            let bound = 1.0 / ((out_c * k * k) as f64).sqrt();
            Some(vb.get_with_hints(
                out_c,
                "bias",
                Init::Uniform {
                    lo: -bound,
                    up: bound,
                },
            )?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

impl Module for ConvTranspose {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight, self.stride, self.padding)?;
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?),
            None => Ok(y),
        }
    }
}

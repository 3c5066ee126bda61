//! Fused CPU kernels for the segmentation network and the mask generator:
//! batch normalization (optionally with a rectifier), 2x nearest upsampling
//! with skip concatenation, and 2x2 max pooling.
//!
//! Their backward passes are computed directly and are not themselves
//! differentiable. Nothing in this crate needs second derivatives through
//! these layers; only the critic does, and it does not use them.

use std::sync::Arc;

use candle_core::{
    CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor, Var, WithDType,
};
use candle_nn::{Init, VarBuilder};

use crate::error::Result;

/// How normalization layers behave in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Batch statistics; running averages are left alone.
    TrainFrozenStats,
    /// Running averages; nothing is updated.
    Eval,
}

impl Mode {
    pub fn is_training(self) -> bool {
        !matches!(self, Mode::Eval)
    }
}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op operands must be contiguous".into()))?;
    Ok(&s.as_slice::<T>()?[start..end])
}

fn dims4(dims: &[usize]) -> candle_core::Result<(usize, usize, usize, usize)> {
    match *dims {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => candle_core::bail!("expected a rank-4 tensor, got {dims:?}"),
    }
}

fn values<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

macro_rules! by_dtype {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => Err(candle_core::Error::Msg(format!("unsupported dtype {other:?}")).into()),
        }
    };
}

fn storage<T: WithDType>(v: Vec<T>) -> CpuStorage {
    T::to_cpu_storage_owned(v)
}

// ---------------------------------------------------------------- batch norm

/// `(x, gamma, beta) -> gamma * (x - mean) * inv_std + beta`, then an
/// optional rectifier, with per-channel statistics fixed at construction.
struct BatchNormOp {
    mean: Arc<Vec<f64>>,
    inv_std: Arc<Vec<f64>>,
    relu: bool,
    /// Whether the statistics came from this very batch, in which case the
    /// backward pass also differentiates through them.
    batch_stats: bool,
}

fn bn_fwd<T: WithDType>(
    op: &BatchNormOp,
    x: &[T],
    dims: &[usize],
    gamma: &[T],
    beta: &[T],
) -> candle_core::Result<CpuStorage> {
    let (b, c, h, w) = dims4(dims)?;
    let hw = h * w;
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let scale = gamma[ci].to_f64() * op.inv_std[ci];
            let shift = beta[ci].to_f64() - op.mean[ci] * scale;
            let base = (bi * c + ci) * hw;
            for (o, v) in out[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                let y = v.to_f64() * scale + shift;
                *o = T::from_f64(if op.relu && y < 0.0 { 0.0 } else { y });
            }
        }
    }
    Ok(storage(out))
}

fn bn_bwd<T: WithDType>(
    op: &BatchNormOp,
    x: &Tensor,
    gamma: &Tensor,
    res: &Tensor,
    grad: &Tensor,
) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let n = (b * hw) as f64;
    let xv = values::<T>(x)?;
    let gv = values::<T>(grad)?;
    let rv = if op.relu {
        Some(values::<T>(res)?)
    } else {
        None
    };
    let gam = values::<T>(gamma)?;
    let upstream = |i: usize| -> f64 {
        match &rv {
            Some(r) if r[i].to_f64() <= 0.0 => 0.0,
            _ => gv[i].to_f64(),
        }
    };
    let mut d_beta = vec![0f64; c];
    let mut d_gamma = vec![0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let g = upstream(i);
                let xhat = (xv[i].to_f64() - op.mean[ci]) * op.inv_std[ci];
                d_beta[ci] += g;
                d_gamma[ci] += g * xhat;
            }
        }
    }
    let mut dx = vec![T::zero(); xv.len()];
    for bi in 0..b {
        for ci in 0..c {
            let k = gam[ci].to_f64() * op.inv_std[ci];
            let (mb, mg) = (d_beta[ci] / n, d_gamma[ci] / n);
            let base = (bi * c + ci) * hw;
            for i in base..base + hw {
                let g = upstream(i);
                let v = if op.batch_stats {
                    let xhat = (xv[i].to_f64() - op.mean[ci]) * op.inv_std[ci];
                    k * (g - mb - xhat * mg)
                } else {
                    k * g
                };
                dx[i] = T::from_f64(v);
            }
        }
    }
    let dev = x.device();
    let to_t = |v: Vec<f64>| -> candle_core::Result<Tensor> {
        Tensor::from_vec(v.into_iter().map(T::from_f64).collect::<Vec<T>>(), c, dev)
    };
    let dx = if x.track_op() {
        Some(Tensor::from_vec(dx, x.shape(), dev)?)
    } else {
        None
    };
    Ok((dx, Some(to_t(d_gamma)?), Some(to_t(d_beta)?)))
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "fused-batch-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s1 {
            CpuStorage::F32(_) => bn_fwd::<f32>(
                self,
                contiguous(s1, l1)?,
                l1.dims(),
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
            )?,
            CpuStorage::F64(_) => bn_fwd::<f64>(
                self,
                contiguous(s1, l1)?,
                l1.dims(),
                contiguous(s2, l2)?,
                contiguous(s3, l3)?,
            )?,
            _ => candle_core::bail!("batch norm supports f32 and f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        by_dtype!(x.dtype(), bn_bwd(self, x, gamma, res, grad))
    }
}

fn channel_stats<T: WithDType>(x: &Tensor) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let hw = h * w;
    let v = values::<T>(x)?;
    let n = (b * hw) as f64;
    let mut mean = vec![0f64; c];
    let mut var = vec![0f64; c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            mean[ci] += v[base..base + hw].iter().map(|x| x.to_f64()).sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            var[ci] += v[base..base + hw]
                .iter()
                .map(|x| (x.to_f64() - mean[ci]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok((mean, var))
}

/// Spatial batch normalization with PyTorch's momentum convention.
#[derive(Clone)]
pub struct Norm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl Norm {
    pub fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        let weight = vb.get_with_hints(c, "weight", Init::Const(1.0))?;
        let bias = vb.get_with_hints(c, "bias", Init::Const(0.0))?;
        let running_mean =
            Var::from_tensor(&vb.get_with_hints(c, "running_mean", Init::Const(0.0))?)?;
        let running_var =
            Var::from_tensor(&vb.get_with_hints(c, "running_var", Init::Const(1.0))?)?;
        Ok(Self {
            weight,
            bias,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_act(x, mode, false)
    }

    /// Normalization followed by a rectifier, fused.
    pub fn forward_relu(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_act(x, mode, true)
    }

    fn forward_act(&self, x: &Tensor, mode: Mode, relu: bool) -> Result<Tensor> {
        let x = x.contiguous()?;
        let (mean, var) = if mode.is_training() {
            let (mean, var) = by_dtype!(x.dtype(), channel_stats(&x))?;
            if mode == Mode::Train {
                let n = (x.elem_count() / x.dim(1)?) as f64;
                let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let m = self.momentum;
                let dev = x.device();
                let dt = self.running_mean.dtype();
                let batch_mean = Tensor::from_vec(mean.clone(), mean.len(), dev)?.to_dtype(dt)?;
                let batch_var = Tensor::from_vec(var.clone(), var.len(), dev)?.to_dtype(dt)?;
                let rm =
                    ((self.running_mean.as_tensor().detach() * (1.0 - m))? + (batch_mean * m)?)?;
                let rv = ((self.running_var.as_tensor().detach() * (1.0 - m))?
                    + (batch_var * (m * unbiased))?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
            }
            (mean, var)
        } else {
            let to_f64 = |t: &Tensor| t.to_dtype(DType::F64)?.to_vec1::<f64>();
            (
                to_f64(self.running_mean.as_tensor())?,
                to_f64(self.running_var.as_tensor())?,
            )
        };
        let inv_std = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let op = BatchNormOp {
            mean: Arc::new(mean),
            inv_std: Arc::new(inv_std),
            relu,
            batch_stats: mode.is_training(),
        };
        Ok(x.apply_op3(&self.weight, &self.bias, op)?)
    }
}

// ------------------------------------------------------- upsample and concat

/// `(deep: B x Cd x H x W, skip: B x Cs x 2H x 2W) -> B x (Cd + Cs) x 2H x 2W`,
/// nearest-neighbor upsampling of `deep` followed by channel concatenation.
struct UpConcat;
/// `deep: B x C x H x W -> B x C x 2H x 2W`, nearest neighbor.
struct Up2;

fn up_into<T: WithDType>(
    deep: &[T],
    b: usize,
    cd: usize,
    h: usize,
    w: usize,
    c_total: usize,
    out: &mut [T],
) {
    let (oh, ow) = (2 * h, 2 * w);
    for bi in 0..b {
        for ci in 0..cd {
            let src = &deep[(bi * cd + ci) * h * w..][..h * w];
            let dst = &mut out[(bi * c_total + ci) * oh * ow..][..oh * ow];
            for y in 0..oh {
                let row = &src[(y / 2) * w..][..w];
                for (x, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                    *v = row[x / 2];
                }
            }
        }
    }
}

/// Sum each 2x2 block of channels `c0..c0+cd` of `grad` (`B x Ct x 2H x 2W`).
fn sum_pool<T: WithDType>(
    grad: &[T],
    b: usize,
    c_total: usize,
    c0: usize,
    cd: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); b * cd * h * w];
    for bi in 0..b {
        for ci in 0..cd {
            let src = &grad[(bi * c_total + c0 + ci) * oh * ow..][..oh * ow];
            let dst = &mut out[(bi * cd + ci) * h * w..][..h * w];
            for y in 0..oh {
                for x in 0..ow {
                    dst[(y / 2) * w + x / 2] += src[y * ow + x];
                }
            }
        }
    }
    out
}

fn up_concat_fwd<T: WithDType>(
    deep: &[T],
    dl: &Layout,
    skip: &[T],
    sl: &Layout,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, cd, h, w) = dims4(dl.dims())?;
    let (sb, cs, sh, sw) = dims4(sl.dims())?;
    if sb != b || sh != 2 * h || sw != 2 * w {
        candle_core::bail!(
            "skip {:?} does not match upsampled {:?}",
            sl.dims(),
            dl.dims()
        );
    }
    let ct = cd + cs;
    let plane = sh * sw;
    let mut out = vec![T::zero(); b * ct * plane];
    up_into(deep, b, cd, h, w, ct, &mut out);
    for bi in 0..b {
        let src = &skip[bi * cs * plane..][..cs * plane];
        out[(bi * ct + cd) * plane..][..cs * plane].copy_from_slice(src);
    }
    Ok((storage(out), Shape::from((b, ct, sh, sw))))
}

fn up_concat_bwd<T: WithDType>(
    deep: &Tensor,
    skip: &Tensor,
    grad: &Tensor,
) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
    let (b, cd, h, w) = deep.dims4()?;
    let cs = skip.dim(1)?;
    let ct = cd + cs;
    let g = values::<T>(grad)?;
    let d_deep = sum_pool(&g, b, ct, 0, cd, h, w);
    let plane = 4 * h * w;
    let mut d_skip = Vec::with_capacity(b * cs * plane);
    for bi in 0..b {
        d_skip.extend_from_slice(&g[(bi * ct + cd) * plane..][..cs * plane]);
    }
    Ok((
        Some(Tensor::from_vec(d_deep, deep.shape(), deep.device())?),
        Some(Tensor::from_vec(d_skip, skip.shape(), skip.device())?),
    ))
}

impl CustomOp2 for UpConcat {
    fn name(&self) -> &'static str {
        "upsample2-concat"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                up_concat_fwd::<f32>(contiguous(s1, l1)?, l1, contiguous(s2, l2)?, l2)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                up_concat_fwd::<f64>(contiguous(s1, l1)?, l1, contiguous(s2, l2)?, l2)
            }
            _ => candle_core::bail!("upsample-concat needs matching f32 or f64 operands"),
        }
    }

    fn bwd(
        &self,
        deep: &Tensor,
        skip: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        by_dtype!(deep.dtype(), up_concat_bwd(deep, skip, grad))
    }
}

fn up2_fwd<T: WithDType>(x: &[T], l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, h, w) = dims4(l.dims())?;
    let mut out = vec![T::zero(); b * c * 4 * h * w];
    up_into(x, b, c, h, w, c, &mut out);
    Ok((storage(out), Shape::from((b, c, 2 * h, 2 * w))))
}

fn up2_bwd<T: WithDType>(x: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
    let (b, c, h, w) = x.dims4()?;
    let g = values::<T>(grad)?;
    Ok(Some(Tensor::from_vec(
        sum_pool(&g, b, c, 0, c, h, w),
        x.shape(),
        x.device(),
    )?))
}

impl CustomOp1 for Up2 {
    fn name(&self) -> &'static str {
        "upsample2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => up2_fwd::<f32>(contiguous(s, l)?, l),
            CpuStorage::F64(_) => up2_fwd::<f64>(contiguous(s, l)?, l),
            _ => candle_core::bail!("upsample supports f32 and f64 only"),
        }
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        by_dtype!(x.dtype(), up2_bwd(x, grad))
    }
}

/// Nearest-neighbor 2x upsampling of `deep`, concatenated with `skip` along
/// channels when given.
pub fn upsample2_concat(deep: &Tensor, skip: Option<&Tensor>) -> Result<Tensor> {
    let deep = deep.contiguous()?;
    Ok(match skip {
        Some(s) => deep.apply_op2(&s.contiguous()?, UpConcat)?,
        None => deep.apply_op1(Up2)?,
    })
}

// ---------------------------------------------------------------- max pool

/// 2x2, stride-2 max pooling; the gradient goes to the first maximum of each
/// window in row-major order.
struct MaxPool2;

fn window_argmax<T: WithDType>(x: &[T], w: usize, y: usize, xo: usize) -> usize {
    let cand = [
        2 * y * w + 2 * xo,
        2 * y * w + 2 * xo + 1,
        (2 * y + 1) * w + 2 * xo,
        (2 * y + 1) * w + 2 * xo + 1,
    ];
    let mut best = cand[0];
    for &i in &cand[1..] {
        if x[i].to_f64() > x[best].to_f64() {
            best = i;
        }
    }
    best
}

fn pool_fwd<T: WithDType>(x: &[T], l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
    let (b, c, h, w) = dims4(l.dims())?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![T::zero(); b * c * oh * ow];
    for p in 0..b * c {
        let src = &x[p * h * w..][..h * w];
        for y in 0..oh {
            for xo in 0..ow {
                out[p * oh * ow + y * ow + xo] = src[window_argmax(src, w, y, xo)];
            }
        }
    }
    Ok((storage(out), Shape::from((b, c, oh, ow))))
}

fn pool_bwd<T: WithDType>(x: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
    let (b, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let xv = values::<T>(x)?;
    let g = values::<T>(grad)?;
    let mut dx = vec![T::zero(); xv.len()];
    for p in 0..b * c {
        let src = &xv[p * h * w..][..h * w];
        for y in 0..oh {
            for xo in 0..ow {
                dx[p * h * w + window_argmax(src, w, y, xo)] += g[p * oh * ow + y * ow + xo];
            }
        }
    }
    Ok(Some(Tensor::from_vec(dx, x.shape(), x.device())?))
}

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        match s {
            CpuStorage::F32(_) => pool_fwd::<f32>(contiguous(s, l)?, l),
            CpuStorage::F64(_) => pool_fwd::<f64>(contiguous(s, l)?, l),
            _ => candle_core::bail!("max pool supports f32 and f64 only"),
        }
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        by_dtype!(x.dtype(), pool_bwd(x, grad))
    }
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(MaxPool2)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle_core::Device;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        assert_eq!(a.dims(), b.dims());
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    /// Reference batch norm from plain tensor ops.
    fn reference_bn(x: &Tensor, g: &Tensor, b: &Tensor, relu: bool) -> Tensor {
        let mean = x
            .mean_keepdim(3)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(0)
            .unwrap();
        let xc = x.broadcast_sub(&mean).unwrap();
        let var = xc
            .sqr()
            .unwrap()
            .mean_keepdim(3)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(0)
            .unwrap();
        let c = x.dim(1).unwrap();
        let y = xc
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&g.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&b.reshape((1, c, 1, 1)).unwrap())
            .unwrap();
        if relu {
            y.relu().unwrap()
        } else {
            y
        }
    }

    #[test]
    fn batch_norm_matches_reference_values_and_gradients() {
        for relu in [false, true] {
            let store = ParamStore::new(0, DType::F64, &Device::Cpu);
            let bn = Norm::new(3, store.var_builder()).unwrap();
            let x = Var::from_tensor(&rand(&[4, 3, 5, 6], 1)).unwrap();
            let target = rand(&[4, 3, 5, 6], 2);
            let ours = if relu {
                bn.forward_relu(x.as_tensor(), Mode::TrainFrozenStats)
                    .unwrap()
            } else {
                bn.forward(x.as_tensor(), Mode::TrainFrozenStats).unwrap()
            };
            let theirs = reference_bn(x.as_tensor(), &bn.weight, &bn.bias, relu);
            assert!(max_diff(&ours, &theirs) < 1e-12);
            let go = (ours * &target)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            let gt = (theirs * &target)
                .unwrap()
                .sum_all()
                .unwrap()
                .backward()
                .unwrap();
            for t in [x.as_tensor(), &bn.weight, &bn.bias] {
                assert!(max_diff(go.get(t).unwrap(), gt.get(t).unwrap()) < 1e-10);
            }
        }
    }

    #[test]
    fn eval_mode_uses_running_stats_and_train_mode_updates_them() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let bn = Norm::new(2, store.var_builder()).unwrap();
        let x = rand(&[2, 2, 3, 3], 3);
        let y = bn.forward(&x, Mode::Eval).unwrap();
        assert!(max_diff(&y, &(&x / (1.0f64 + 1e-5).sqrt()).unwrap()) < 1e-12);
        bn.forward(&x, Mode::TrainFrozenStats).unwrap();
        assert_eq!(
            bn.running_mean.as_tensor().to_vec1::<f64>().unwrap(),
            vec![0.0; 2]
        );
        bn.forward(&x, Mode::Train).unwrap();
        let mean = x
            .mean_keepdim(3)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(0)
            .unwrap();
        let expected = (mean.flatten_all().unwrap() * 0.1).unwrap();
        assert!(max_diff(bn.running_mean.as_tensor(), &expected) < 1e-12);
    }

    #[test]
    fn upsample_concat_matches_reference() {
        let deep = Var::from_tensor(&rand(&[2, 3, 4, 5], 4)).unwrap();
        let skip = Var::from_tensor(&rand(&[2, 2, 8, 10], 5)).unwrap();
        let target = rand(&[2, 5, 8, 10], 6);
        let ours = upsample2_concat(deep.as_tensor(), Some(skip.as_tensor())).unwrap();
        let up = deep.as_tensor().upsample_nearest2d(8, 10).unwrap();
        let theirs = Tensor::cat(&[&up, skip.as_tensor()], 1).unwrap();
        assert!(max_diff(&ours, &theirs) < 1e-15);
        let go = (ours * &target)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gt = (theirs * &target)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for t in [deep.as_tensor(), skip.as_tensor()] {
            assert!(max_diff(go.get(t).unwrap(), gt.get(t).unwrap()) < 1e-12);
        }
        let plain = upsample2_concat(deep.as_tensor(), None).unwrap();
        assert!(max_diff(&plain, &up) < 1e-15);
    }

    #[test]
    fn max_pool_matches_reference() {
        let x = Var::from_tensor(&rand(&[2, 3, 6, 8], 7)).unwrap();
        let target = rand(&[2, 3, 3, 4], 8);
        let ours = max_pool2(x.as_tensor()).unwrap();
        let theirs = x.as_tensor().max_pool2d(2).unwrap();
        assert!(max_diff(&ours, &theirs) < 1e-15);
        let go = (ours * &target)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let got = go
            .get(x.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let xv = x
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let tv = target.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mut expected = vec![0.0; xv.len()];
        for p in 0..6 {
            for y in 0..3 {
                for c in 0..4 {
                    let cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .map(|(dy, dx)| p * 48 + (2 * y + dy) * 8 + 2 * c + dx);
                    let best =
                        cells
                            .iter()
                            .copied()
                            .fold(cells[0], |b, i| if xv[i] > xv[b] { i } else { b });
                    expected[best] = tv[p * 12 + y * 4 + c];
                }
            }
        }
        assert_eq!(got, expected);
    }
}

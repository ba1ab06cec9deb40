//! Fused group and batch normalization and nearest 2x upsampling.
//!
//! Composing these from elementwise candle ops builds long broadcast chains
//! whose backward passes dominate a training step on CPU. Both ops here
//! accumulate in f64 and return gradients computed in one pass.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Result, Shape, Tensor};

fn host(s: &CpuStorage, l: &Layout) -> Result<Vec<f64>> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("fused op expects contiguous input".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        other => candle_core::bail!("fused op does not support {:?}", other.dtype()),
    })
}

fn storage(v: Vec<f64>, dtype: DType) -> Result<CpuStorage> {
    Ok(match dtype {
        DType::F32 => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        DType::F64 => CpuStorage::F64(v),
        dt => candle_core::bail!("fused op does not support {dt:?}"),
    })
}

fn tensor_host(t: &Tensor) -> Result<Vec<f64>> {
    t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()
}

fn from_host(v: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype())
}

#[derive(Debug, Clone, Copy)]
struct GroupNormOp {
    groups: usize,
    eps: f64,
}

struct Stats {
    /// normalized input, same layout as x
    xhat: Vec<f64>,
    rstd: Vec<f64>,
}

impl GroupNormOp {
    fn stats(&self, x: &[f64], n: usize, c: usize, hw: usize) -> Stats {
        let len = (c / self.groups) * hw;
        let mut xhat = vec![0.0; x.len()];
        let mut rstd = vec![0.0; n * self.groups];
        for (i, (src, dst)) in x.chunks_exact(len).zip(xhat.chunks_exact_mut(len)).enumerate() {
            let mean = src.iter().sum::<f64>() / len as f64;
            let var = src.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
            let r = 1.0 / (var + self.eps).sqrt();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * r;
            }
            rstd[i] = r;
        }
        Stats { xhat, rstd }
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "fused-group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let x = host(s1, l1)?;
        let gamma = host(s2, l2)?;
        let beta = host(s3, l3)?;
        let hw = h * w;
        let mut y = self.stats(&x, n, c, hw).xhat;
        for (i, plane) in y.chunks_exact_mut(hw).enumerate() {
            let ch = i % c;
            for v in plane {
                *v = *v * gamma[ch] + beta[ch];
            }
        }
        Ok((storage(y, s1.dtype())?, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let cg = c / self.groups;
        let xv = tensor_host(x)?;
        let g = tensor_host(gamma)?;
        let dy = tensor_host(grad)?;
        let Stats { xhat, rstd } = self.stats(&xv, n, c, hw);
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut dx = vec![0.0; xv.len()];
        let len = cg * hw;
        for b in 0..n {
            for grp in 0..self.groups {
                let off = (b * self.groups + grp) * len;
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for j in 0..len {
                    let ch = grp * cg + j / hw;
                    let d = dy[off + j];
                    dgamma[ch] += d * xhat[off + j];
                    dbeta[ch] += d;
                    let dh = d * g[ch];
                    sum_d += dh;
                    sum_dx += dh * xhat[off + j];
                }
                let (md, mdx) = (sum_d / len as f64, sum_dx / len as f64);
                let r = rstd[b * self.groups + grp];
                for j in 0..len {
                    let ch = grp * cg + j / hw;
                    let dh = dy[off + j] * g[ch];
                    dx[off + j] = r * (dh - md - xhat[off + j] * mdx);
                }
            }
        }
        Ok((
            Some(from_host(dx, x)?),
            Some(from_host(dgamma, gamma)?),
            Some(from_host(dbeta, beta)?),
        ))
    }
}

/// Per-sample group normalization over `(N, C, H, W)` with a per-channel
/// affine transform.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    let c = x.dims4()?.1;
    if groups == 0 || c % groups != 0 {
        candle_core::bail!("{c} channels cannot form {groups} groups");
    }
    let x = x.contiguous()?;
    x.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps })
}

/// Per-channel mean and biased variance over batch and space.
pub fn channel_stats(x: &[f64], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, plane) in x.chunks_exact(hw).enumerate() {
        mean[i % c] += plane.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for (i, plane) in x.chunks_exact(hw).enumerate() {
        let mu = mean[i % c];
        var[i % c] += plane.iter().map(|v| (v - mu).powi(2)).sum::<f64>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

#[derive(Debug, Clone, Copy)]
struct BatchNormOp {
    eps: f64,
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
    ) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let x = host(s1, l1)?;
        let gamma = host(s2, l2)?;
        let beta = host(s3, l3)?;
        let (mean, var) = channel_stats(&x, n, c, hw);
        let mut y = x;
        for (i, plane) in y.chunks_exact_mut(hw).enumerate() {
            let ch = i % c;
            let scale = gamma[ch] / (var[ch] + self.eps).sqrt();
            for v in plane {
                *v = (*v - mean[ch]) * scale + beta[ch];
            }
        }
        Ok((storage(y, s1.dtype())?, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let m = (n * hw) as f64;
        let xv = tensor_host(x)?;
        let g = tensor_host(gamma)?;
        let dy = tensor_host(grad)?;
        let (mean, var) = channel_stats(&xv, n, c, hw);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for (i, (xs, ds)) in xv.chunks_exact(hw).zip(dy.chunks_exact(hw)).enumerate() {
            let ch = i % c;
            for (xi, di) in xs.iter().zip(ds) {
                dgamma[ch] += di * (xi - mean[ch]) * rstd[ch];
                dbeta[ch] += di;
            }
        }
        let mut dx = vec![0.0; xv.len()];
        for (i, ((xs, ds), out)) in xv.chunks_exact(hw).zip(dy.chunks_exact(hw)).zip(dx.chunks_exact_mut(hw)).enumerate() {
            let ch = i % c;
            let k = g[ch] * rstd[ch];
            for ((xi, di), o) in xs.iter().zip(ds).zip(out) {
                let xhat = (xi - mean[ch]) * rstd[ch];
                *o = k * (di - dbeta[ch] / m - xhat * dgamma[ch] / m);
            }
        }
        Ok((
            Some(from_host(dx, x)?),
            Some(from_host(dgamma, gamma)?),
            Some(from_host(dbeta, beta)?),
        ))
    }
}

/// Batch normalization of `(N, C, H, W)` with batch statistics and a
/// per-channel affine transform.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (n, _, h, w) = x.dims4()?;
    if n * h * w < 2 {
        candle_core::bail!("batch norm needs more than one value per channel");
    }
    let x = x.contiguous()?;
    x.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormOp { eps })
}

#[derive(Debug, Clone, Copy)]
struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "nearest-upsample-2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let (n, c, h, w) = l.shape().dims4()?;
        let x = host(s, l)?;
        let mut y = vec![0.0; x.len() * 4];
        for (src, dst) in x.chunks_exact(h * w).zip(y.chunks_exact_mut(4 * h * w)) {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
                }
            }
        }
        Ok((storage(y, s.dtype())?, Shape::from((n, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let dy = tensor_host(grad)?;
        let mut dx = vec![0.0; dy.len() / 4];
        for (src, dst) in dy.chunks_exact(4 * h * w).zip(dx.chunks_exact_mut(h * w)) {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                }
            }
        }
        Ok(Some(from_host(dx, arg)?))
    }
}

/// Nearest-neighbour 2x upsampling of `(N, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    x.dims4()?;
    x.contiguous()?.apply_op1(Upsample2x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::Rng;
        let mut r = crate::rng::rng_for(seed, &[]);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn composed_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let xg = x.reshape((n, groups, (c / groups) * h * w)).unwrap();
        let mean = xg.mean_keepdim(D::Minus1).unwrap();
        let centred = xg.broadcast_sub(&mean).unwrap();
        let var = centred.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let normed = centred.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        normed
            .reshape((n, c, h, w))
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn group_norm_matches_composed_ops_in_value_and_gradient() {
        let x = Var::from_tensor(&rand(&[2, 6, 3, 4], 1)).unwrap();
        let gamma = Var::from_tensor(&rand(&[6], 2)).unwrap();
        let beta = Var::from_tensor(&rand(&[6], 3)).unwrap();
        let probe = rand(&[2, 6, 3, 4], 4);
        let fused = group_norm(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), 3, 1e-5).unwrap();
        let reference = composed_norm(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), 3);
        assert!(max_diff(&fused, &reference) < 1e-12);
        let g1 = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            let a = g1.get(v.as_tensor()).unwrap();
            let b = g2.get(v.as_tensor()).unwrap();
            assert!(max_diff(a, b) < 1e-10, "{}", max_diff(a, b));
        }
    }

    fn composed_batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
        let c = x.dims4().unwrap().1;
        let xt = x.transpose(0, 1).unwrap().contiguous().unwrap().reshape((c, ())).unwrap();
        let mean = xt.mean_keepdim(D::Minus1).unwrap();
        let centred = xt.broadcast_sub(&mean).unwrap();
        let var = centred.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let normed = centred.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap();
        let (n, _, h, w) = x.dims4().unwrap();
        normed
            .reshape((c, n, h, w))
            .unwrap()
            .transpose(0, 1)
            .unwrap()
            .broadcast_mul(&gamma.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, c, 1, 1)).unwrap())
            .unwrap()
    }

    #[test]
    fn batch_norm_matches_composed_ops_in_value_and_gradient() {
        let x = Var::from_tensor(&rand(&[3, 4, 2, 5], 7)).unwrap();
        let gamma = Var::from_tensor(&rand(&[4], 8)).unwrap();
        let beta = Var::from_tensor(&rand(&[4], 9)).unwrap();
        let probe = rand(&[3, 4, 2, 5], 10);
        let fused = batch_norm(x.as_tensor(), gamma.as_tensor(), beta.as_tensor(), 1e-5).unwrap();
        let reference = composed_batch_norm(x.as_tensor(), gamma.as_tensor(), beta.as_tensor());
        assert!(max_diff(&fused, &reference) < 1e-12);
        let g1 = (fused * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &gamma, &beta] {
            let a = g1.get(v.as_tensor()).unwrap();
            let b = g2.get(v.as_tensor()).unwrap();
            assert!(max_diff(a, b) < 1e-10, "{}", max_diff(a, b));
        }
    }

    #[test]
    fn batch_norm_needs_two_values_per_channel() {
        let x = rand(&[1, 2, 1, 1], 1);
        let g = rand(&[2], 2);
        assert!(batch_norm(&x, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn group_norm_rejects_uneven_groups() {
        let x = rand(&[1, 6, 2, 2], 1);
        let g = rand(&[6], 2);
        assert!(group_norm(&x, &g, &g, 4, 1e-5).is_err());
    }

    #[test]
    fn upsample_matches_candle_in_value_and_gradient() {
        let x = Var::from_tensor(&rand(&[2, 3, 3, 5], 5)).unwrap();
        let probe = rand(&[2, 3, 6, 10], 6);
        let ours = upsample2x(x.as_tensor()).unwrap();
        let theirs = x.as_tensor().upsample_nearest2d(6, 10).unwrap();
        assert_eq!(max_diff(&ours, &theirs), 0.0);
        let g1 = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let g2 = (theirs * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(max_diff(g1.get(x.as_tensor()).unwrap(), g2.get(x.as_tensor()).unwrap()) < 1e-12);
    }

    #[test]
    fn f32_inputs_stay_f32() {
        let x = rand(&[1, 2, 2, 2], 1).to_dtype(DType::F32).unwrap();
        let g = Tensor::ones(2, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(group_norm(&x, &g, &g, 1, 1e-5).unwrap().dtype(), DType::F32);
        assert_eq!(upsample2x(&x).unwrap().dtype(), DType::F32);
    }
}

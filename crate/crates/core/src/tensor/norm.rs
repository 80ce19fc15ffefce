//! Batch normalization and the fixed per-pixel unit-length layer.

use super::tape::{acc_owned, Node, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Running statistics owned by a batch-norm layer (updated in train mode).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }
}

impl<T: Scalar> Tape<T> {
    /// Per-channel normalization of [B,C,H,W]. In train mode the batch
    /// statistics are used (and `running` is updated by exponential moving
    /// average with the given momentum); in eval mode `running` is used.
    /// Differentiable w.r.t. input, gamma and beta; gradients flow through
    /// the batch statistics in train mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        eps: T,
        momentum: T,
        train: bool,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!(
                "batch_norm2d affine parameters must have shape [{c}]"
            )));
        }
        if running.mean.len() != c {
            return Err(Error::shape(format!("running stats have {} channels, input {c}", running.mean.len())));
        }
        let n = b * h * w;
        if train && n < 2 {
            return Err(Error::invalid("batch_norm2d in train mode needs B*H*W >= 2"));
        }
        let xs = self.value(x).as_slice();
        let area = h * w;
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            let inv_n = T::from_f64(1.0 / n as f64);
            for ci in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    let p = &xs[(bi * c + ci) * area..(bi * c + ci + 1) * area];
                    s += p.iter().copied().sum();
                }
                mean[ci] = s * inv_n;
            }
            for ci in 0..c {
                let m = mean[ci];
                let mut s = T::zero();
                for bi in 0..b {
                    let p = &xs[(bi * c + ci) * area..(bi * c + ci + 1) * area];
                    for &v in p {
                        let d = v - m;
                        s += d * d;
                    }
                }
                var[ci] = s * inv_n;
            }
            let keep = T::one() - momentum;
            for ci in 0..c {
                running.mean[ci] = keep * running.mean[ci] + momentum * mean[ci];
                running.var[ci] = keep * running.var[ci] + momentum * var[ci];
            }
        } else {
            mean.copy_from_slice(&running.mean);
            var.copy_from_slice(&running.var);
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).as_slice().to_vec();
        let bta = self.value(beta).as_slice().to_vec();
        let mut xhat = Tensor::zeros(&[b, c, h, w]);
        let mut out = Tensor::zeros(&[b, c, h, w]);
        {
            let xh = xhat.as_mut_slice();
            let os = out.as_mut_slice();
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * area;
                    let m = mean[ci];
                    let is = inv_std[ci];
                    let gc = g[ci];
                    let bc = bta[ci];
                    for i in 0..area {
                        let v = (xs[base + i] - m) * is;
                        xh[base + i] = v;
                        os[base + i] = gc * v + bc;
                    }
                }
            }
        }
        let req = self.any_requires(&[x, gamma, beta]);
        Ok(self.push(out, req, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }))
    }

    /// Normalizes each per-pixel 3-vector of [B,3,H,W] to unit length; a
    /// vector with norm below `eps` is divided by `eps` instead.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: T) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("l2_normalize_channels expects 3 channels, got {c}")));
        }
        let xs = self.value(x).as_slice();
        let area = h * w;
        let mut norms = vec![T::zero(); b * area];
        let mut out = Tensor::zeros(&[b, 3, h, w]);
        {
            let os = out.as_mut_slice();
            for bi in 0..b {
                for i in 0..area {
                    let i0 = (bi * 3) * area + i;
                    let i1 = (bi * 3 + 1) * area + i;
                    let i2 = (bi * 3 + 2) * area + i;
                    let (v0, v1, v2) = (xs[i0], xs[i1], xs[i2]);
                    let n = (v0 * v0 + v1 * v1 + v2 * v2).sqrt();
                    norms[bi * area + i] = n;
                    let d = if n >= eps { n } else { eps };
                    os[i0] = v0 / d;
                    os[i1] = v1 / d;
                    os[i2] = v2 / d;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, req, Op::L2NormChannels { x, eps, norms }))
    }
}

pub(super) fn backward_batch_norm<T: Scalar>(
    nodes: &mut [Node<T>],
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &Tensor<T>,
    inv_std: &[T],
    train: bool,
    grad: &Tensor<T>,
) -> Result<()> {
    let (b, c, h, w) = xhat.dims4()?;
    let area = h * w;
    let n = b * area;
    let inv_n = T::from_f64(1.0 / n as f64);
    let gs = grad.as_slice();
    let xh = xhat.as_slice();
    let g = nodes[gamma.0].value.as_slice().to_vec();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * area;
            for i in 0..area {
                dgamma[ci] += gs[base + i] * xh[base + i];
                dbeta[ci] += gs[base + i];
            }
        }
    }

    if nodes[x.0].requires {
        let mut dx = Tensor::zeros(&[b, c, h, w]);
        let dxs = dx.as_mut_slice();
        if train {
            // dxhat = g * gamma; dx = inv_std * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            for ci in 0..c {
                let mean_dxhat = dbeta[ci] * g[ci] * inv_n;
                let mean_dxhat_xhat = dgamma[ci] * g[ci] * inv_n;
                let is = inv_std[ci];
                for bi in 0..b {
                    let base = (bi * c + ci) * area;
                    for i in 0..area {
                        let dxhat = gs[base + i] * g[ci];
                        dxs[base + i] = is * (dxhat - mean_dxhat - xh[base + i] * mean_dxhat_xhat);
                    }
                }
            }
        } else {
            for ci in 0..c {
                let scale = g[ci] * inv_std[ci];
                for bi in 0..b {
                    let base = (bi * c + ci) * area;
                    for i in 0..area {
                        dxs[base + i] = gs[base + i] * scale;
                    }
                }
            }
        }
        acc_owned(nodes, x, dx);
    }
    acc_owned(nodes, gamma, Tensor::from_vec(&[c], dgamma)?);
    acc_owned(nodes, beta, Tensor::from_vec(&[c], dbeta)?);
    Ok(())
}

pub(super) fn backward_l2_normalize<T: Scalar>(
    nodes: &mut [Node<T>],
    x: Var,
    eps: T,
    norms: &[T],
    y: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[x.0].requires {
        return Ok(());
    }
    let (b, _, h, w) = y.dims4()?;
    let area = h * w;
    let gs = grad.as_slice();
    let ys = y.as_slice();
    let mut dx = Tensor::zeros(y.shape());
    {
        let dxs = dx.as_mut_slice();
        for bi in 0..b {
            for i in 0..area {
                let i0 = (bi * 3) * area + i;
                let i1 = (bi * 3 + 1) * area + i;
                let i2 = (bi * 3 + 2) * area + i;
                let n = norms[bi * area + i];
                if n >= eps {
                    let dot = gs[i0] * ys[i0] + gs[i1] * ys[i1] + gs[i2] * ys[i2];
                    dxs[i0] = (gs[i0] - ys[i0] * dot) / n;
                    dxs[i1] = (gs[i1] - ys[i1] * dot) / n;
                    dxs[i2] = (gs[i2] - ys[i2] * dot) / n;
                } else {
                    dxs[i0] = gs[i0] / eps;
                    dxs[i1] = gs[i1] / eps;
                    dxs[i2] = gs[i2] / eps;
                }
            }
        }
    }
    acc_owned(nodes, x, dx);
    Ok(())
}

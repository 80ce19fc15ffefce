//! Set aggregation, concatenation, pooling and upsampling.

use super::tape::{acc_owned, Node, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    /// Elementwise max over the set dimension: [n,C,H,W] -> [1,C,H,W].
    /// The subgradient routes to the lowest-index argmax element.
    pub fn reduce_max_over_set(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if n < 1 {
            return Err(Error::invalid("reduce_max_over_set needs n >= 1"));
        }
        let xs = self.value(x).as_slice();
        let plane = c * h * w;
        let mut out = Tensor::zeros(&[1, c, h, w]);
        let mut argmax = vec![0u32; plane];
        {
            let os = out.as_mut_slice();
            os.copy_from_slice(&xs[..plane]);
            for si in 1..n {
                let sp = &xs[si * plane..(si + 1) * plane];
                for i in 0..plane {
                    if sp[i] > os[i] {
                        os[i] = sp[i];
                        argmax[i] = si as u32;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, req, Op::MaxSet { x, argmax }))
    }

    /// Repeat [1,C,H,W] n times along the set dimension.
    pub fn broadcast_over_set(&mut self, x: Var, n: usize) -> Result<Var> {
        let (one, c, h, w) = self.value(x).dims4()?;
        if one != 1 {
            return Err(Error::shape(format!("broadcast_over_set input must be [1,C,H,W], got {:?}", self.value(x).shape())));
        }
        let xs = self.value(x).as_slice();
        let plane = c * h * w;
        let mut data = Vec::with_capacity(n * plane);
        for _ in 0..n {
            data.extend_from_slice(xs);
        }
        let out = Tensor::from_vec(&[n, c, h, w], data)?;
        let req = self.requires(x);
        Ok(self.push(out, req, Op::BroadcastSet { x }))
    }

    /// Concatenate along the channel dimension; all inputs [B,C_i,H,W].
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat_channels of zero tensors"));
        }
        let (b, _, h, w) = self.value(xs[0]).dims4()?;
        let mut c_total = 0;
        for v in xs {
            let (bi, ci, hi, wi) = self.value(*v).dims4()?;
            if bi != b || hi != h || wi != w {
                return Err(Error::shape(format!(
                    "concat_channels mismatch: {:?} vs {:?}",
                    self.value(xs[0]).shape(),
                    self.value(*v).shape()
                )));
            }
            c_total += ci;
        }
        let mut out = Tensor::zeros(&[b, c_total, h, w]);
        {
            let os = out.as_mut_slice();
            let area = h * w;
            for bi in 0..b {
                let mut off = 0;
                for v in xs {
                    let ci = self.value(*v).shape()[1];
                    let src = self.value(*v).as_slice();
                    let from = bi * ci * area;
                    let to = (bi * c_total + off) * area;
                    os[to..to + ci * area].copy_from_slice(&src[from..from + ci * area]);
                    off += ci;
                }
            }
        }
        let req = self.any_requires(xs);
        Ok(self.push(out, req, Op::ConcatChannels { xs: xs.to_vec() }))
    }

    /// Spatial mean: [B,C,H,W] -> [B,C].
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xs = self.value(x).as_slice();
        let area = h * w;
        let inv = T::from_f64(1.0 / area as f64);
        let mut out = Tensor::zeros(&[b, c]);
        {
            let os = out.as_mut_slice();
            for i in 0..b * c {
                let s: T = xs[i * area..(i + 1) * area].iter().copied().sum();
                os[i] = s * inv;
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, req, Op::GlobalAvgPool { x }))
    }

    /// Bilinear upsampling by an integer factor.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample factor must be >= 1"));
        }
        let (b, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let xs = self.value(x).as_slice();
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        {
            let os = out.as_mut_slice();
            for bc in 0..b * c {
                let src = &xs[bc * h * w..(bc + 1) * h * w];
                let dst = &mut os[bc * ho * wo..(bc + 1) * ho * wo];
                for oy in 0..ho {
                    let (y0, y1, wy) = src_coords(oy, factor, h);
                    for ox in 0..wo {
                        let (x0, x1, wx) = src_coords(ox, factor, w);
                        let a = src[y0 * w + x0];
                        let bv = src[y0 * w + x1];
                        let cv = src[y1 * w + x0];
                        let d = src[y1 * w + x1];
                        let top = a + (bv - a) * wx;
                        let bot = cv + (d - cv) * wx;
                        dst[oy * wo + ox] = top + (bot - top) * wy;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(out, req, Op::UpsampleBilinear { x, factor }))
    }
}

/// Source interpolation coordinates for output index `o` at integer `factor`.
fn src_coords<T: Scalar>(o: usize, factor: usize, extent: usize) -> (usize, usize, T) {
    let s = (o as f64 + 0.5) / factor as f64 - 0.5;
    let s = s.max(0.0);
    let i0 = s.floor() as usize;
    let i0 = i0.min(extent - 1);
    let i1 = (i0 + 1).min(extent - 1);
    let frac = T::from_f64(s - i0 as f64);
    (i0, i1, frac)
}

pub(super) fn backward_max_set<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, argmax: &[u32], grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[x.0].requires {
        return Ok(());
    }
    let mut dx = Tensor::zeros(nodes[x.0].value.shape());
    let plane = grad.len();
    {
        let dxs = dx.as_mut_slice();
        let gs = grad.as_slice();
        for i in 0..plane {
            dxs[argmax[i] as usize * plane + i] = gs[i];
        }
    }
    acc_owned(nodes, x, dx);
    Ok(())
}

pub(super) fn backward_broadcast_set<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[x.0].requires {
        return Ok(());
    }
    let plane = nodes[x.0].value.len();
    let n = grad.len() / plane;
    let mut dx = Tensor::zeros(nodes[x.0].value.shape());
    {
        let dxs = dx.as_mut_slice();
        let gs = grad.as_slice();
        for si in 0..n {
            for i in 0..plane {
                dxs[i] += gs[si * plane + i];
            }
        }
    }
    acc_owned(nodes, x, dx);
    Ok(())
}

pub(super) fn backward_concat_channels<T: Scalar>(
    nodes: &mut [Node<T>], xs: &[Var], grad: &Tensor<T>,
) -> Result<()> {
    let (b, c_total, h, w) = grad.dims4()?;
    let area = h * w;
    let gs = grad.as_slice();
    let mut off = 0;
    for v in xs {
        let ci = nodes[v.0].value.shape()[1];
        if nodes[v.0].requires {
            let mut dv = Tensor::zeros(nodes[v.0].value.shape());
            {
                let ds = dv.as_mut_slice();
                for bi in 0..b {
                    let from = (bi * c_total + off) * area;
                    let to = bi * ci * area;
                    ds[to..to + ci * area].copy_from_slice(&gs[from..from + ci * area]);
                }
            }
            acc_owned(nodes, *v, dv);
        }
        off += ci;
    }
    Ok(())
}

pub(super) fn backward_global_avg_pool<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[x.0].requires {
        return Ok(());
    }
    let (b, c, h, w) = nodes[x.0].value.dims4()?;
    let area = h * w;
    let inv = T::from_f64(1.0 / area as f64);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    {
        let dxs = dx.as_mut_slice();
        let gs = grad.as_slice();
        for i in 0..b * c {
            let g = gs[i] * inv;
            for v in &mut dxs[i * area..(i + 1) * area] {
                *v = g;
            }
        }
    }
    acc_owned(nodes, x, dx);
    Ok(())
}

pub(super) fn backward_upsample_bilinear<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, factor: usize, grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[x.0].requires {
        return Ok(());
    }
    let (b, c, h, w) = nodes[x.0].value.dims4()?;
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = Tensor::zeros(&[b, c, h, w]);
    {
        let dxs = dx.as_mut_slice();
        let gs = grad.as_slice();
        for bc in 0..b * c {
            let dst = &mut dxs[bc * h * w..(bc + 1) * h * w];
            let src = &gs[bc * ho * wo..(bc + 1) * ho * wo];
            for oy in 0..ho {
                let (y0, y1, wy) = src_coords::<T>(oy, factor, h);
                for ox in 0..wo {
                    let (x0, x1, wx) = src_coords::<T>(ox, factor, w);
                    let g = src[oy * wo + ox];
                    let one = T::one();
                    dst[y0 * w + x0] += g * (one - wy) * (one - wx);
                    dst[y0 * w + x1] += g * (one - wy) * wx;
                    dst[y1 * w + x0] += g * wy * (one - wx);
                    dst[y1 * w + x1] += g * wy * wx;
                }
            }
        }
    }
    acc_owned(nodes, x, dx);
    Ok(())
}

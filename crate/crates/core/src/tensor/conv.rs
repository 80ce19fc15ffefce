//! 2-d convolutions: full (im2col + GEMM) and depthwise (direct loops).

use super::tape::{acc_owned, Node, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(super) fn out_extent(h: usize, k: usize, padding: usize, stride: usize) -> usize {
    (h + 2 * padding - k) / stride + 1
}

fn validate(k: usize, stride: usize, padding: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::invalid(format!("kernel size {k} must be odd")));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::invalid(format!("stride {stride} not in {{1, 2}}")));
    }
    if padding != (k - 1) / 2 {
        return Err(Error::invalid(format!("padding {padding} must be (k-1)/2 for k={k}")));
    }
    Ok(())
}

/// Gather x[b] into a [cin*k*k, ho*wo] patch matrix.
fn im2col<T: Scalar>(
    x: &[T], cin: usize, h: usize, w: usize, k: usize, stride: usize, padding: usize,
    ho: usize, wo: usize, cols: &mut [T],
) {
    let area = ho * wo;
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        for v in &mut dst[oh * wo..(oh + 1) * wo] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &xc[ih as usize * w..(ih as usize + 1) * w];
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        dst[oh * wo + ow] = if iw < 0 || iw >= w as isize {
                            T::zero()
                        } else {
                            src_row[iw as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a [cin*k*k, ho*wo] patch-gradient matrix back into dx[b].
fn col2im_add<T: Scalar>(
    cols: &[T], cin: usize, h: usize, w: usize, k: usize, stride: usize, padding: usize,
    ho: usize, wo: usize, dx: &mut [T],
) {
    let area = ho * wo;
    for c in 0..cin {
        let dxc = &mut dx[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * area..(row + 1) * area];
                for oh in 0..ho {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        dxc[ih as usize * w + iw as usize] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Full convolution: input [B,Cin,H,W] with kernel [Cout,Cin,k,k].
    /// Stride in {1,2}, padding fixed at (k-1)/2.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, cin, h, wd) = self.value(x).dims4()?;
        let (cout, cin_w, k, k2) = self.value(w).dims4()?;
        if k != k2 {
            return Err(Error::shape(format!("kernel must be square, got {k}x{k2}")));
        }
        validate(k, stride, padding)?;
        if cin != cin_w {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but kernel expects {cin_w}"
            )));
        }
        let ho = out_extent(h, k, padding, stride);
        let wo = out_extent(wd, k, padding, stride);
        let area = ho * wo;
        let mut out = Tensor::zeros(&[b, cout, ho, wo]);
        let xs = self.value(x).as_slice();
        let ws = self.value(w).as_slice();
        if k == 1 && stride == 1 {
            for bi in 0..b {
                let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                let yb = &mut out.as_mut_slice()[bi * cout * area..(bi + 1) * cout * area];
                T::gemm(cout, cin, area, T::one(), ws, xb, T::zero(), yb);
            }
        } else {
            let mut cols = vec![T::zero(); cin * k * k * area];
            for bi in 0..b {
                let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                im2col(xb, cin, h, wd, k, stride, padding, ho, wo, &mut cols);
                let yb = &mut out.as_mut_slice()[bi * cout * area..(bi + 1) * cout * area];
                T::gemm(cout, cin * k * k, area, T::one(), ws, &cols, T::zero(), yb);
            }
        }
        let req = self.any_requires(&[x, w]);
        Ok(self.push(out, req, Op::Conv2d { x, w, stride, padding }))
    }

    /// Depthwise convolution: input [B,C,H,W] with kernel [C,1,k,k].
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (b, c, h, wd) = self.value(x).dims4()?;
        let (cw, one, k, k2) = self.value(w).dims4()?;
        if one != 1 || k != k2 {
            return Err(Error::shape(format!(
                "depthwise kernel must be [C,1,k,k], got {:?}",
                self.value(w).shape()
            )));
        }
        validate(k, stride, padding)?;
        if c != cw {
            return Err(Error::shape(format!("depthwise input has {c} channels, kernel {cw}")));
        }
        let ho = out_extent(h, k, padding, stride);
        let wo = out_extent(wd, k, padding, stride);
        let mut out = Tensor::zeros(&[b, c, ho, wo]);
        let xs = self.value(x).as_slice();
        let ws = self.value(w).as_slice();
        {
            let os = out.as_mut_slice();
            for bi in 0..b {
                for ci in 0..c {
                    let xp = &xs[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
                    let wp = &ws[ci * k * k..(ci + 1) * k * k];
                    let op = &mut os[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
                    for oh in 0..ho {
                        for ow in 0..wo {
                            let mut acc = T::zero();
                            for ki in 0..k {
                                let ih = (oh * stride + ki) as isize - padding as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let iw = (ow * stride + kj) as isize - padding as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += xp[ih as usize * wd + iw as usize] * wp[ki * k + kj];
                                }
                            }
                            op[oh * wo + ow] = acc;
                        }
                    }
                }
            }
        }
        let req = self.any_requires(&[x, w]);
        Ok(self.push(out, req, Op::DepthwiseConv2d { x, w, stride, padding }))
    }
}

pub(super) fn backward_conv2d<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, w: Var, stride: usize, padding: usize, grad: &Tensor<T>,
) -> Result<()> {
    let (b, cin, h, wd) = nodes[x.0].value.dims4()?;
    let (cout, _, k, _) = nodes[w.0].value.dims4()?;
    let (_, _, ho, wo) = grad.dims4()?;
    let area = ho * wo;
    let need_dx = nodes[x.0].requires;
    let need_dw = nodes[w.0].requires;
    let mut dx = if need_dx { Some(Tensor::zeros(&[b, cin, h, wd])) } else { None };
    let mut dw = if need_dw { Some(Tensor::zeros(&[cout, cin, k, k])) } else { None };
    let xs = nodes[x.0].value.as_slice();
    let ws = nodes[w.0].value.as_slice();
    let gs = grad.as_slice();
    if k == 1 && stride == 1 {
        for bi in 0..b {
            let gb = &gs[bi * cout * area..(bi + 1) * cout * area];
            let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.as_mut_slice()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                T::gemm_ta(cin, cout, area, T::one(), ws, gb, T::zero(), dxb);
            }
            if let Some(dw) = dw.as_mut() {
                T::gemm_tb(cout, area, cin, T::one(), gb, xb, T::one(), dw.as_mut_slice());
            }
        }
    } else {
        let mut cols = vec![T::zero(); cin * k * k * area];
        let mut dcols = vec![T::zero(); cin * k * k * area];
        for bi in 0..b {
            let gb = &gs[bi * cout * area..(bi + 1) * cout * area];
            let xb = &xs[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            im2col(xb, cin, h, wd, k, stride, padding, ho, wo, &mut cols);
            if let Some(dw) = dw.as_mut() {
                T::gemm_tb(cout, area, cin * k * k, T::one(), gb, &cols, T::one(), dw.as_mut_slice());
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm_ta(cin * k * k, cout, area, T::one(), ws, gb, T::zero(), &mut dcols);
                let dxb = &mut dx.as_mut_slice()[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                col2im_add(&dcols, cin, h, wd, k, stride, padding, ho, wo, dxb);
            }
        }
    }
    if let Some(dx) = dx {
        acc_owned(nodes, x, dx);
    }
    if let Some(dw) = dw {
        acc_owned(nodes, w, dw);
    }
    Ok(())
}

pub(super) fn backward_depthwise<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, w: Var, stride: usize, padding: usize, grad: &Tensor<T>,
) -> Result<()> {
    let (b, c, h, wd) = nodes[x.0].value.dims4()?;
    let (_, _, k, _) = nodes[w.0].value.dims4()?;
    let (_, _, ho, wo) = grad.dims4()?;
    let need_dx = nodes[x.0].requires;
    let need_dw = nodes[w.0].requires;
    let mut dx = if need_dx { Some(Tensor::zeros(&[b, c, h, wd])) } else { None };
    let mut dw = if need_dw { Some(Tensor::zeros(&[c, 1, k, k])) } else { None };
    let xs = nodes[x.0].value.as_slice();
    let ws = nodes[w.0].value.as_slice();
    let gs = grad.as_slice();
    for bi in 0..b {
        for ci in 0..c {
            let xp = &xs[(bi * c + ci) * h * wd..(bi * c + ci + 1) * h * wd];
            let wp = &ws[ci * k * k..(ci + 1) * k * k];
            let gp = &gs[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
            for oh in 0..ho {
                for ow in 0..wo {
                    let g = gp[oh * wo + ow];
                    if g == T::zero() {
                        continue;
                    }
                    for ki in 0..k {
                        let ih = (oh * stride + ki) as isize - padding as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let iw = (ow * stride + kj) as isize - padding as isize;
                            if iw < 0 || iw >= wd as isize {
                                continue;
                            }
                            let xi = ih as usize * wd + iw as usize;
                            if let Some(dx) = dx.as_mut() {
                                dx.as_mut_slice()[(bi * c + ci) * h * wd + xi] += g * wp[ki * k + kj];
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw.as_mut_slice()[ci * k * k + ki * k + kj] += g * xp[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dx) = dx {
        acc_owned(nodes, x, dx);
    }
    if let Some(dw) = dw {
        acc_owned(nodes, w, dw);
    }
    Ok(())
}

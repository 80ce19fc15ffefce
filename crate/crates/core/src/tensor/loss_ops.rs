//! Fully connected layers, classification/regression losses, and the
//! softmax machinery used by the continuous relaxation.

use super::tape::{acc_owned, Node, Op, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<T: Scalar> Tape<T> {
    /// y[B,O] = x[B,F] w[O,F]^T + b[O]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bs, f) = self.value(x).dims2()?;
        let (o, fw) = self.value(w).dims2()?;
        if f != fw {
            return Err(Error::shape(format!("linear: input features {f} vs weight {fw}")));
        }
        if self.value(b).shape() != [o] {
            return Err(Error::shape(format!("linear: bias must be [{o}]")));
        }
        let mut out = Tensor::zeros(&[bs, o]);
        T::gemm_tb(bs, f, o, T::one(), self.value(x).as_slice(), self.value(w).as_slice(), T::zero(), out.as_mut_slice());
        {
            let os = out.as_mut_slice();
            let bias = self.value(b).as_slice();
            for bi in 0..bs {
                for oi in 0..o {
                    os[bi * o + oi] += bias[oi];
                }
            }
        }
        let req = self.any_requires(&[x, w, b]);
        Ok(self.push(out, req, Op::Linear { x, w, b }))
    }

    /// Mean over the batch of -log softmax(logits)[target], max-stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::shape(format!("{} targets for batch of {b}", targets.len())));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::invalid(format!("target class {t} out of range 0..{k}")));
        }
        let xs = self.value(logits).as_slice();
        let mut probs = Tensor::zeros(&[b, k]);
        let mut loss = T::zero();
        {
            let ps = probs.as_mut_slice();
            for bi in 0..b {
                let row = &xs[bi * k..(bi + 1) * k];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut denom = T::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    ps[bi * k + j] = e;
                    denom += e;
                }
                let lse = denom.ln();
                for j in 0..k {
                    ps[bi * k + j] /= denom;
                }
                loss += lse - (row[targets[bi]] - m);
            }
        }
        loss *= T::from_f64(1.0 / b as f64);
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::SoftmaxCrossEntropy { logits, probs, targets: targets.to_vec() },
        ))
    }

    /// Softmax over a 1-d vector.
    pub fn softmax_1d(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape();
        if shape.len() != 1 {
            return Err(Error::shape(format!("softmax_1d expects 1-d, got {shape:?}")));
        }
        let xs = self.value(x).as_slice();
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_1d input".to_string()));
        }
        let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let mut data: Vec<T> = xs.iter().map(|&v| (v - m).exp()).collect();
        let denom: T = data.iter().copied().sum();
        for v in &mut data {
            *v /= denom;
        }
        let y = Tensor::from_vec(shape, data)?;
        let req = self.requires(x);
        Ok(self.push(y.clone(), req, Op::Softmax1d { x, y }))
    }

    /// Row r of a [R,K] matrix as a [K] vector.
    pub fn index_row(&mut self, x: Var, row: usize) -> Result<Var> {
        let (r, k) = self.value(x).dims2()?;
        if row >= r {
            return Err(Error::invalid(format!("row {row} out of range 0..{r}")));
        }
        let data = self.value(x).as_slice()[row * k..(row + 1) * k].to_vec();
        let out = Tensor::from_vec(&[k], data)?;
        let req = self.requires(x);
        Ok(self.push(out, req, Op::IndexRow { x, row }))
    }

    /// sum_k w[k] * xs[k]; a `None` entry contributes a zero tensor (and
    /// zero gradient to its weight).
    pub fn weighted_sum(&mut self, xs: &[Option<Var>], w: Var) -> Result<Var> {
        let k = self.value(w).len();
        if xs.len() != k {
            return Err(Error::shape(format!("{} inputs for {k} weights", xs.len())));
        }
        let Some(first) = xs.iter().flatten().next() else {
            return Err(Error::invalid("weighted_sum needs at least one non-zero input"));
        };
        let shape = self.value(*first).shape().to_vec();
        let ws = self.value(w).as_slice().to_vec();
        let mut out = Tensor::zeros(&shape);
        for (i, x) in xs.iter().enumerate() {
            if let Some(x) = x {
                if self.value(*x).shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "weighted_sum input {i}: {:?} vs {:?}",
                        self.value(*x).shape(),
                        shape
                    )));
                }
                out.add_scaled(self.value(*x), ws[i])?;
            }
        }
        let mut inputs: Vec<Var> = xs.iter().flatten().copied().collect();
        inputs.push(w);
        let req = self.any_requires(&inputs);
        Ok(self.push(out, req, Op::WeightedSum { xs: xs.to_vec(), w }))
    }

    /// (1/m) * sum over masked pixels of (1 - pred . truth), for
    /// pred [1,3,H,W] against a fixed truth of the same layout.
    pub fn cosine_loss(&mut self, pred: Var, truth: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let (one, c, h, w) = self.value(pred).dims4()?;
        if one != 1 || c != 3 {
            return Err(Error::shape(format!("cosine_loss expects [1,3,H,W], got {:?}", self.value(pred).shape())));
        }
        if truth.len() != 3 * h * w {
            return Err(Error::shape("cosine_loss truth layout mismatch"));
        }
        if mask.len() != h * w {
            return Err(Error::shape("cosine_loss mask layout mismatch"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cosine_loss over an empty mask"));
        }
        let area = h * w;
        let ps = self.value(pred).as_slice();
        let ts = truth.as_slice();
        let mut acc = T::zero();
        for i in 0..area {
            if mask[i] {
                let dot = ps[i] * ts[i] + ps[area + i] * ts[area + i] + ps[2 * area + i] * ts[2 * area + i];
                acc += T::one() - dot;
            }
        }
        let loss = acc * T::from_f64(1.0 / count as f64);
        let req = self.requires(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::CosineLoss { pred, truth: truth.clone(), mask: mask.to_vec(), count },
        ))
    }
}

pub(super) fn backward_linear<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, w: Var, b: Var, grad: &Tensor<T>,
) -> Result<()> {
    let (bs, f) = nodes[x.0].value.dims2()?;
    let (o, _) = nodes[w.0].value.dims2()?;
    let gs = grad.as_slice();
    if nodes[x.0].requires {
        let mut dx = Tensor::zeros(&[bs, f]);
        T::gemm(bs, o, f, T::one(), gs, nodes[w.0].value.as_slice(), T::zero(), dx.as_mut_slice());
        acc_owned(nodes, x, dx);
    }
    if nodes[w.0].requires {
        let mut dw = Tensor::zeros(&[o, f]);
        T::gemm_ta(o, bs, f, T::one(), gs, nodes[x.0].value.as_slice(), T::zero(), dw.as_mut_slice());
        acc_owned(nodes, w, dw);
    }
    if nodes[b.0].requires {
        let mut db = vec![T::zero(); o];
        for bi in 0..bs {
            for oi in 0..o {
                db[oi] += gs[bi * o + oi];
            }
        }
        acc_owned(nodes, b, Tensor::from_vec(&[o], db)?);
    }
    Ok(())
}

pub(super) fn backward_softmax_ce<T: Scalar>(
    nodes: &mut [Node<T>], logits: Var, probs: &Tensor<T>, targets: &[usize], grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[logits.0].requires {
        return Ok(());
    }
    let (b, k) = probs.dims2()?;
    let g = grad.item()? * T::from_f64(1.0 / b as f64);
    let mut dl = probs.map(|p| p * g);
    {
        let ds = dl.as_mut_slice();
        for (bi, &t) in targets.iter().enumerate() {
            ds[bi * k + t] -= g;
        }
    }
    acc_owned(nodes, logits, dl);
    Ok(())
}

pub(super) fn backward_softmax_1d<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, y: &Tensor<T>, grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[x.0].requires {
        return Ok(());
    }
    let ys = y.as_slice();
    let gs = grad.as_slice();
    let dot: T = ys.iter().zip(gs).map(|(&yi, &gi)| yi * gi).sum();
    let data: Vec<T> = ys.iter().zip(gs).map(|(&yi, &gi)| yi * (gi - dot)).collect();
    acc_owned(nodes, x, Tensor::from_vec(y.shape(), data)?);
    Ok(())
}

pub(super) fn backward_index_row<T: Scalar>(
    nodes: &mut [Node<T>], x: Var, row: usize, grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[x.0].requires {
        return Ok(());
    }
    let (_, k) = nodes[x.0].value.dims2()?;
    let mut dx = Tensor::zeros(nodes[x.0].value.shape());
    dx.as_mut_slice()[row * k..(row + 1) * k].copy_from_slice(grad.as_slice());
    acc_owned(nodes, x, dx);
    Ok(())
}

pub(super) fn backward_weighted_sum<T: Scalar>(
    nodes: &mut [Node<T>], xs: &[Option<Var>], w: Var, grad: &Tensor<T>,
) -> Result<()> {
    let ws = nodes[w.0].value.as_slice().to_vec();
    for (i, x) in xs.iter().enumerate() {
        if let Some(x) = x {
            if nodes[x.0].requires {
                let dx = grad.map(|g| g * ws[i]);
                acc_owned(nodes, *x, dx);
            }
        }
    }
    if nodes[w.0].requires {
        let mut dw = vec![T::zero(); ws.len()];
        for (i, x) in xs.iter().enumerate() {
            if let Some(x) = x {
                let vs = nodes[x.0].value.as_slice();
                dw[i] = vs.iter().zip(grad.as_slice()).map(|(&v, &g)| v * g).sum();
            }
        }
        acc_owned(nodes, w, Tensor::from_vec(&[ws.len()], dw)?);
    }
    Ok(())
}

pub(super) fn backward_cosine_loss<T: Scalar>(
    nodes: &mut [Node<T>], pred: Var, truth: &Tensor<T>, mask: &[bool], count: usize, grad: &Tensor<T>,
) -> Result<()> {
    if !nodes[pred.0].requires {
        return Ok(());
    }
    let g = grad.item()? * T::from_f64(-1.0 / count as f64);
    let area = mask.len();
    let ts = truth.as_slice();
    let mut dp = Tensor::zeros(nodes[pred.0].value.shape());
    {
        let ds = dp.as_mut_slice();
        for i in 0..area {
            if mask[i] {
                ds[i] = g * ts[i];
                ds[area + i] = g * ts[area + i];
                ds[2 * area + i] = g * ts[2 * area + i];
            }
        }
    }
    acc_owned(nodes, pred, dp);
    Ok(())
}

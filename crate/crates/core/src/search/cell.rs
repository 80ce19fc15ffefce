//! Cells: the mixed (supernet) and fixed (child) realizations of the DAG.

use rand_chacha::ChaCha8Rng;

use super::{
    edge_list, edges_into, CandidateOpKind, CellGenotype, CellKind, CellSpec, NUM_INPUT_NODES,
    NUM_INTERMEDIATE_NODES,
};
use crate::error::{Error, Result};
use crate::nn::{Fwd, ParamId, ParamStore, ReluConvBn, SepConv};
use crate::tensor::{Scalar, Tensor, Var};

/// One instantiated candidate operation on an edge.
pub enum CandidateOp {
    Sep(SepConv),
    /// Identity; only valid on stride-1 edges.
    SkipIdentity,
    /// Strided 1x1 projection standing in for skip where the resolution
    /// changes.
    SkipReduce(ReluConvBn),
    Zero { stride: usize },
}

impl CandidateOp {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: CandidateOpKind,
        channels: usize,
        stride: usize,
        affine: bool,
    ) -> Result<Self> {
        Ok(match kind {
            CandidateOpKind::SepConv1x1 | CandidateOpKind::SepConv3x3 | CandidateOpKind::SepConv5x5 => {
                let k = kind.kernel_size().unwrap();
                CandidateOp::Sep(SepConv::new(store, rng, name, channels, channels, k, stride, affine)?)
            }
            CandidateOpKind::SkipConnection => {
                if stride == 1 {
                    CandidateOp::SkipIdentity
                } else {
                    CandidateOp::SkipReduce(ReluConvBn::new(store, rng, name, channels, channels, 1, stride, affine))
                }
            }
            CandidateOpKind::Zero => CandidateOp::Zero { stride },
        })
    }

    /// Output for the mixing sum; `None` marks the zero operation, whose
    /// contribution is dropped from the weighted sum.
    fn forward_mixed<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Option<Var>> {
        Ok(match self {
            CandidateOp::Sep(op) => Some(op.forward(f, x)?),
            CandidateOp::SkipIdentity => Some(x),
            CandidateOp::SkipReduce(op) => Some(op.forward(f, x)?),
            CandidateOp::Zero { .. } => None,
        })
    }

    /// Concrete output, materializing zero tensors (child networks).
    fn forward_concrete<T: Scalar>(&self, f: &mut Fwd<T>, x: Var) -> Result<Var> {
        match self {
            CandidateOp::Sep(op) => op.forward(f, x),
            CandidateOp::SkipIdentity => Ok(x),
            CandidateOp::SkipReduce(op) => op.forward(f, x),
            CandidateOp::Zero { stride } => {
                let (b, c, h, w) = f.tape.value(x).dims4()?;
                Ok(f.tape.constant(Tensor::zeros(&[b, c, h / stride, w / stride])))
            }
        }
    }

    fn clone_refs(&self) -> Self {
        match self {
            CandidateOp::Sep(op) => CandidateOp::Sep(op.clone()),
            CandidateOp::SkipIdentity => CandidateOp::SkipIdentity,
            CandidateOp::SkipReduce(op) => CandidateOp::SkipReduce(op.clone()),
            CandidateOp::Zero { stride } => CandidateOp::Zero { stride: *stride },
        }
    }
}

/// All five candidates on one edge, mixed by softmax weights.
pub struct MixedEdge {
    pub ops: Vec<CandidateOp>,
}

impl MixedEdge {
    fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        stride: usize,
    ) -> Result<Self> {
        let ops = CandidateOpKind::ALL
            .iter()
            .map(|kind| {
                CandidateOp::build(store, rng, &format!("{name}.{}", kind.name()), *kind, channels, stride, false)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixedEdge { ops })
    }

    /// Continuous relaxation: sum of candidate outputs weighted by the
    /// softmax of this edge's mixing weights.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: Var, weights: Var) -> Result<Var> {
        let mut outs = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            outs.push(op.forward_mixed(f, x)?);
        }
        f.tape.weighted_sum(&outs, weights)
    }
}

/// Softmaxed mixing weights for every edge of one cell kind, computed once
/// per forward session and shared by all cells of that kind.
pub struct MixWeights {
    pub rows: Vec<Var>,
}

impl MixWeights {
    pub fn compute<T: Scalar>(f: &mut Fwd<T>, alpha: ParamId) -> Result<Self> {
        let a = f.param(alpha);
        let rows = (0..super::num_edges())
            .map(|e| {
                let row = f.tape.index_row(a, e)?;
                f.tape.softmax_1d(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixWeights { rows })
    }
}

pub enum CellOps {
    /// One mixed edge per DAG edge.
    Mixed(Vec<MixedEdge>),
    /// Two retained (source, op) pairs per intermediate node.
    Fixed(Vec<Vec<(usize, CandidateOp)>>),
}

/// A cell instance wired into a network.
pub struct Cell {
    pub spec: CellSpec,
    pre0: ReluConvBn,
    pre1: ReluConvBn,
    pub ops: CellOps,
}

impl Cell {
    /// Builds the fixed input projections: 1x1 conv to the cell width, with
    /// stride 2 on the first input when the previous cell reduced.
    fn preprocess<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_pp: usize,
        c_p: usize,
        channels: usize,
        reduction_prev: bool,
        affine: bool,
    ) -> (ReluConvBn, ReluConvBn) {
        let s0 = if reduction_prev { 2 } else { 1 };
        let pre0 = ReluConvBn::new(store, rng, &format!("{name}.pre0"), c_pp, channels, 1, s0, affine);
        let pre1 = ReluConvBn::new(store, rng, &format!("{name}.pre1"), c_p, channels, 1, 1, affine);
        (pre0, pre1)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn supernet<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_pp: usize,
        c_p: usize,
        channels: usize,
        kind: CellKind,
        reduction_prev: bool,
    ) -> Result<Self> {
        let spec = CellSpec { kind, channels };
        let (pre0, pre1) = Self::preprocess(store, rng, name, c_pp, c_p, channels, reduction_prev, false);
        let edges = edge_list()
            .iter()
            .map(|e| {
                MixedEdge::build(
                    store,
                    rng,
                    &format!("{name}.e{}", e.index),
                    channels,
                    spec.edge_stride(e.src),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Cell { spec, pre0, pre1, ops: CellOps::Mixed(edges) })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn child<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_pp: usize,
        c_p: usize,
        channels: usize,
        kind: CellKind,
        reduction_prev: bool,
        genotype: &CellGenotype,
    ) -> Result<Self> {
        genotype.validate()?;
        let spec = CellSpec { kind, channels };
        let (pre0, pre1) = Self::preprocess(store, rng, name, c_pp, c_p, channels, reduction_prev, true);
        let mut nodes = Vec::with_capacity(NUM_INTERMEDIATE_NODES);
        for (j, pair) in genotype.nodes.iter().enumerate() {
            let mut retained = Vec::with_capacity(2);
            for (slot, choice) in pair.iter().enumerate() {
                let op = CandidateOp::build(
                    store,
                    rng,
                    &format!("{name}.n{j}.{slot}.{}", choice.op.name()),
                    choice.op,
                    channels,
                    spec.edge_stride(choice.src),
                    true,
                )?;
                retained.push((choice.src, op));
            }
            nodes.push(retained);
        }
        Ok(Cell { spec, pre0, pre1, ops: CellOps::Fixed(nodes) })
    }

    /// A fixed cell that reuses this supernet cell's parameters for the
    /// operations a genotype retains (supernet/child consistency checks).
    pub fn extract_child(&self, genotype: &CellGenotype) -> Result<Self> {
        genotype.validate()?;
        let CellOps::Mixed(edges) = &self.ops else {
            return Err(Error::invalid("extract_child on a fixed cell"));
        };
        let all = edge_list();
        let mut nodes = Vec::with_capacity(NUM_INTERMEDIATE_NODES);
        for (j, pair) in genotype.nodes.iter().enumerate() {
            let mut retained = Vec::with_capacity(2);
            for choice in pair {
                let edge = all[edges_into(j).start + choice.src];
                debug_assert_eq!(edge.src, choice.src);
                let op = edges[edge.index].ops[choice.op.index()].clone_refs();
                retained.push((choice.src, op));
            }
            nodes.push(retained);
        }
        Ok(Cell {
            spec: self.spec.clone(),
            pre0: self.pre0.clone(),
            pre1: self.pre1.clone(),
            ops: CellOps::Fixed(nodes),
        })
    }

    /// Number of channels this cell outputs (4x its internal width).
    pub fn out_channels(&self) -> usize {
        NUM_INTERMEDIATE_NODES * self.spec.channels
    }

    /// Forward through the cell. `mix` supplies the softmaxed edge weights
    /// and must be present exactly for supernet cells.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        s0: Var,
        s1: Var,
        mix: Option<&MixWeights>,
    ) -> Result<Var> {
        let x0 = self.pre0.forward(f, s0)?;
        let x1 = self.pre1.forward(f, s1)?;
        let (_, _, h0, w0) = f.tape.value(x0).dims4()?;
        let (_, _, h1, w1) = f.tape.value(x1).dims4()?;
        if (h0, w0) != (h1, w1) {
            return Err(Error::shape(format!(
                "cell inputs disagree after preprocessing: {h0}x{w0} vs {h1}x{w1}"
            )));
        }
        let mut states = vec![x0, x1];
        match (&self.ops, mix) {
            (CellOps::Mixed(edges), Some(mix)) => {
                let all = edge_list();
                for j in 0..NUM_INTERMEDIATE_NODES {
                    let mut parts = Vec::with_capacity(NUM_INPUT_NODES + j);
                    for e in edges_into(j) {
                        let src = all[e].src;
                        let out = edges[e].forward(f, states[src], mix.rows[e])?;
                        parts.push(out);
                    }
                    states.push(f.tape.add_n(&parts)?);
                }
            }
            (CellOps::Fixed(nodes), None) => {
                for retained in nodes {
                    let mut parts = Vec::with_capacity(retained.len());
                    for (src, op) in retained {
                        parts.push(op.forward_concrete(f, states[*src])?);
                    }
                    states.push(f.tape.add_n(&parts)?);
                }
            }
            (CellOps::Mixed(_), None) => {
                return Err(Error::invalid("supernet cell needs mixing weights"));
            }
            (CellOps::Fixed(_), Some(_)) => {
                return Err(Error::invalid("fixed cell takes no mixing weights"));
            }
        }
        f.tape.concat_channels(&states[NUM_INPUT_NODES..])
    }
}

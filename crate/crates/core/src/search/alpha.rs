//! Architecture mixing weights: one [num_edges, 5] table per cell kind,
//! shared by every cell of that kind within a network.

use rand_chacha::ChaCha8Rng;

use super::{num_edges, CandidateOpKind, CellKind, Genotype};
use crate::error::Result;
use crate::nn::{sample_normal, ParamId, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Initial spread of the mixing weights: near-uniform mixture with the
/// symmetry broken.
pub const ALPHA_INIT_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct ArchParams {
    pub normal: ParamId,
    pub reduction: ParamId,
}

impl ArchParams {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let shape = [num_edges(), CandidateOpKind::COUNT];
        let normal = store.add(
            "alpha.normal",
            sample_normal(rng, &shape, ALPHA_INIT_STD),
            ParamKind::Alpha,
        );
        let reduction = store.add(
            "alpha.reduction",
            sample_normal(rng, &shape, ALPHA_INIT_STD),
            ParamKind::Alpha,
        );
        ArchParams { normal, reduction }
    }

    pub fn of(self, kind: CellKind) -> ParamId {
        match kind {
            CellKind::Normal => self.normal,
            CellKind::Reduction => self.reduction,
        }
    }

    /// Discretize the current store values into a genotype.
    pub fn discretize<T: Scalar>(
        self,
        store: &ParamStore<T>,
        exclude_zero: bool,
        channels: usize,
        blocks: Vec<(String, Vec<CellKind>)>,
    ) -> Result<Genotype> {
        super::discretize(
            store.value(self.normal),
            store.value(self.reduction),
            exclude_zero,
            channels,
            blocks,
        )
    }

    /// An alpha table that reproduces `g` when run through the supernet:
    /// +1e4 on the chosen op of every retained edge, +1e4 on zero for
    /// edges that were dropped.
    pub fn one_hot_like<T: Scalar>(g: &Genotype, kind: CellKind) -> Tensor<T> {
        let cell = g.cell(kind);
        let mut alpha = Tensor::<T>::zeros(&[num_edges(), CandidateOpKind::COUNT]);
        let big = T::from_f64(1e4);
        let edges = super::edge_list();
        let data = alpha.as_mut_slice();
        for e in &edges {
            let retained = cell.nodes[e.node].iter().find(|c| c.src == e.src);
            let op = match retained {
                Some(c) => c.op,
                None => CandidateOpKind::Zero,
            };
            data[e.index * CandidateOpKind::COUNT + op.index()] = big;
        }
        alpha
    }
}

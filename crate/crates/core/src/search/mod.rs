//! The cell search space: candidate operations, the cell DAG, continuous
//! relaxation and discretization into genotypes.

mod alpha;
mod cell;
mod genotype;

pub use alpha::ArchParams;
pub use cell::{Cell, CellOps, MixWeights, MixedEdge};
pub use genotype::{discretize, discretize_cell, CellGenotype, Genotype, NodeChoice};

/// The five candidate operations, in tie-break order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateOpKind {
    SepConv1x1,
    SepConv3x3,
    SepConv5x5,
    SkipConnection,
    Zero,
}

impl CandidateOpKind {
    pub const ALL: [CandidateOpKind; 5] = [
        CandidateOpKind::SepConv1x1,
        CandidateOpKind::SepConv3x3,
        CandidateOpKind::SepConv5x5,
        CandidateOpKind::SkipConnection,
        CandidateOpKind::Zero,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            CandidateOpKind::SepConv1x1 => "sep_conv_1x1",
            CandidateOpKind::SepConv3x3 => "sep_conv_3x3",
            CandidateOpKind::SepConv5x5 => "sep_conv_5x5",
            CandidateOpKind::SkipConnection => "skip_connection",
            CandidateOpKind::Zero => "zero",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn kernel_size(self) -> Option<usize> {
        match self {
            CandidateOpKind::SepConv1x1 => Some(1),
            CandidateOpKind::SepConv3x3 => Some(3),
            CandidateOpKind::SepConv5x5 => Some(5),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Normal,
    Reduction,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Normal => "normal",
            CellKind::Reduction => "reduction",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "normal" => Some(CellKind::Normal),
            "reduction" => Some(CellKind::Reduction),
            _ => None,
        }
    }

    pub fn code(self) -> char {
        match self {
            CellKind::Normal => 'N',
            CellKind::Reduction => 'R',
        }
    }

    pub fn from_code(c: char) -> Option<Self> {
        match c {
            'N' => Some(CellKind::Normal),
            'R' => Some(CellKind::Reduction),
            _ => None,
        }
    }
}

/// Structure of one cell: two input nodes, four intermediate nodes, one
/// output node concatenating the intermediates channel-wise.
#[derive(Debug, Clone)]
pub struct CellSpec {
    pub kind: CellKind,
    pub channels: usize,
}

pub const NUM_INPUT_NODES: usize = 2;
pub const NUM_INTERMEDIATE_NODES: usize = 4;

/// A directed edge of the cell DAG. Sources 0 and 1 are the two input
/// nodes; source 2+j is intermediate node j.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub index: usize,
    pub src: usize,
    pub node: usize,
}

/// All edges (i, j) with i ranging over every node before intermediate
/// node j, in the fixed enumeration order used by the mixing weights.
pub fn edge_list() -> Vec<Edge> {
    let mut edges = Vec::new();
    for node in 0..NUM_INTERMEDIATE_NODES {
        for src in 0..NUM_INPUT_NODES + node {
            edges.push(Edge { index: edges.len(), src, node });
        }
    }
    edges
}

pub fn num_edges() -> usize {
    (0..NUM_INTERMEDIATE_NODES).map(|j| NUM_INPUT_NODES + j).sum()
}

/// Edge indices feeding intermediate node `node`.
pub fn edges_into(node: usize) -> std::ops::Range<usize> {
    let start: usize = (0..node).map(|j| NUM_INPUT_NODES + j).sum();
    start..start + NUM_INPUT_NODES + node
}

impl CellSpec {
    /// Stride applied by operations on the given edge: reduction cells use
    /// stride 2 on edges whose source is an input node.
    pub fn edge_stride(&self, src: usize) -> usize {
        if self.kind == CellKind::Reduction && src < NUM_INPUT_NODES {
            2
        } else {
            1
        }
    }
}

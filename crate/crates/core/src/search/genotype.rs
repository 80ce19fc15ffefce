//! Discrete cell descriptions and the text format they travel in.

use super::{edges_into, edge_list, CandidateOpKind, CellKind, NUM_INPUT_NODES, NUM_INTERMEDIATE_NODES};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One retained incoming edge of an intermediate node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeChoice {
    pub op: CandidateOpKind,
    /// Source node: 0/1 are the cell inputs, 2+j is intermediate node j.
    pub src: usize,
}

/// The retained edges of one cell kind: exactly two per intermediate node,
/// ordered by source index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellGenotype {
    pub nodes: [[NodeChoice; 2]; NUM_INTERMEDIATE_NODES],
}

impl CellGenotype {
    /// Every node fed by skip connections from the two cell inputs.
    pub fn all_skip() -> Self {
        let choice = |src| NodeChoice { op: CandidateOpKind::SkipConnection, src };
        CellGenotype { nodes: [[choice(0), choice(1)]; NUM_INTERMEDIATE_NODES] }
    }

    pub fn validate(&self) -> Result<()> {
        for (j, pair) in self.nodes.iter().enumerate() {
            let limit = NUM_INPUT_NODES + j;
            for c in pair {
                if c.src >= limit {
                    return Err(Error::invalid(format!(
                        "node n{j} cannot take input from source {} (must be earlier in the DAG)",
                        c.src
                    )));
                }
            }
            if pair[0].src == pair[1].src {
                return Err(Error::invalid(format!(
                    "node n{j} has two edges from the same source {}",
                    pair[0].src
                )));
            }
        }
        Ok(())
    }
}

/// A discrete architecture: both cell kinds plus the width and block layout
/// the network is assembled with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub channels: usize,
    /// Named cell sequences, e.g. ("feature", [N,R,N,R,N]).
    pub blocks: Vec<(String, Vec<CellKind>)>,
    pub normal: CellGenotype,
    pub reduction: CellGenotype,
}

fn src_name(src: usize) -> String {
    if src < NUM_INPUT_NODES {
        format!("input{src}")
    } else {
        format!("n{}", src - NUM_INPUT_NODES)
    }
}

fn parse_src(s: &str) -> Option<usize> {
    if let Some(rest) = s.strip_prefix("input") {
        let i: usize = rest.parse().ok()?;
        (i < NUM_INPUT_NODES).then_some(i)
    } else if let Some(rest) = s.strip_prefix('n') {
        let i: usize = rest.parse().ok()?;
        (i < NUM_INTERMEDIATE_NODES).then_some(NUM_INPUT_NODES + i)
    } else {
        None
    }
}

impl Genotype {
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let layout = self
            .blocks
            .iter()
            .map(|(name, cells)| {
                let codes: String = cells.iter().map(|k| k.code()).collect();
                format!("{name}:{codes}")
            })
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!("genotype v1 channels={} layout={}\n", self.channels, layout));
        for (kind, cell) in [(CellKind::Normal, &self.normal), (CellKind::Reduction, &self.reduction)] {
            for (j, pair) in cell.nodes.iter().enumerate() {
                out.push_str(&format!(
                    "{} n{}: {}({}), {}({})\n",
                    kind.name(),
                    j,
                    pair[0].op.name(),
                    src_name(pair[0].src),
                    pair[1].op.name(),
                    src_name(pair[1].src),
                ));
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::parse("empty genotype text"))?;
        let mut channels = None;
        let mut blocks = Vec::new();
        let mut header_parts = header.split_whitespace();
        if header_parts.next() != Some("genotype") || header_parts.next() != Some("v1") {
            return Err(Error::parse("line 1: expected header `genotype v1 ...`"));
        }
        for part in header_parts {
            if let Some(v) = part.strip_prefix("channels=") {
                channels = Some(v.parse::<usize>().map_err(|_| {
                    Error::parse(format!("line 1: bad channel count `{v}`"))
                })?);
            } else if let Some(v) = part.strip_prefix("layout=") {
                for blk in v.split(';').filter(|s| !s.is_empty()) {
                    let (name, codes) = blk
                        .split_once(':')
                        .ok_or_else(|| Error::parse(format!("line 1: bad layout block `{blk}`")))?;
                    let cells = codes
                        .chars()
                        .map(|c| {
                            CellKind::from_code(c)
                                .ok_or_else(|| Error::parse(format!("line 1: bad cell code `{c}`")))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    blocks.push((name.to_string(), cells));
                }
            } else {
                return Err(Error::parse(format!("line 1: unknown header field `{part}`")));
            }
        }
        let channels = channels.ok_or_else(|| Error::parse("line 1: missing channels="))?;

        let mut seen: std::collections::HashMap<(CellKind, usize), Vec<NodeChoice>> =
            std::collections::HashMap::new();
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (head, rest) = line
                .split_once(':')
                .ok_or_else(|| Error::parse(format!("line {lineno}: missing `:`")))?;
            let mut head_it = head.split_whitespace();
            let kind = head_it
                .next()
                .and_then(CellKind::from_name)
                .ok_or_else(|| Error::parse(format!("line {lineno}: bad cell kind in `{head}`")))?;
            let node = head_it
                .next()
                .and_then(|s| s.strip_prefix('n'))
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| Error::parse(format!("line {lineno}: bad node in `{head}`")))?;
            if node >= NUM_INTERMEDIATE_NODES {
                return Err(Error::parse(format!("line {lineno}: node n{node} out of range")));
            }
            let entry = seen.entry((kind, node)).or_default();
            for item in rest.split(',') {
                let item = item.trim();
                if item.is_empty() {
                    continue;
                }
                let (op_name, src_part) = item
                    .split_once('(')
                    .ok_or_else(|| Error::parse(format!("line {lineno}: bad edge `{item}`")))?;
                let src_name = src_part
                    .strip_suffix(')')
                    .ok_or_else(|| Error::parse(format!("line {lineno}: missing `)` in `{item}`")))?;
                let op = CandidateOpKind::from_name(op_name.trim())
                    .ok_or_else(|| Error::parse(format!("line {lineno}: unknown operation `{op_name}`")))?;
                let src = parse_src(src_name.trim())
                    .ok_or_else(|| Error::parse(format!("line {lineno}: unknown source `{src_name}`")))?;
                entry.push(NodeChoice { op, src });
            }
            if entry.len() > 2 {
                return Err(Error::parse(format!(
                    "line {lineno}: node n{node} has {} edges, exactly 2 allowed",
                    entry.len()
                )));
            }
        }

        let mut build = |kind: CellKind| -> Result<CellGenotype> {
            let mut nodes = [[NodeChoice { op: CandidateOpKind::Zero, src: 0 }; 2]; NUM_INTERMEDIATE_NODES];
            for (j, slot) in nodes.iter_mut().enumerate() {
                let found = seen.remove(&(kind, j)).ok_or_else(|| {
                    Error::parse(format!("missing line for {} n{j}", kind.name()))
                })?;
                if found.len() != 2 {
                    return Err(Error::parse(format!(
                        "{} n{j} has {} edges, exactly 2 required",
                        kind.name(),
                        found.len()
                    )));
                }
                slot.copy_from_slice(&found);
                // canonical order: by source index
                slot.sort_by_key(|c| c.src);
            }
            Ok(CellGenotype { nodes })
        };
        let normal = build(CellKind::Normal)?;
        let reduction = build(CellKind::Reduction)?;
        let g = Genotype { channels, blocks, normal, reduction };
        g.normal.validate()?;
        g.reduction.validate()?;
        Ok(g)
    }

    pub fn cell(&self, kind: CellKind) -> &CellGenotype {
        match kind {
            CellKind::Normal => &self.normal,
            CellKind::Reduction => &self.reduction,
        }
    }
}

/// Per-edge softmax weights in f64 (shift-invariant scores for ranking).
fn edge_softmax<T: Scalar>(alpha: &Tensor<T>, edge: usize) -> Vec<f64> {
    let k = CandidateOpKind::COUNT;
    let row: Vec<f64> = alpha.as_slice()[edge * k..(edge + 1) * k]
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Discretize one cell kind: per edge the strongest operation, per node the
/// two incoming edges whose chosen operation carries the largest softmax
/// weight. Ties break toward the lower op index, then the lower source.
pub fn discretize_cell<T: Scalar>(alpha: &Tensor<T>, exclude_zero: bool) -> Result<CellGenotype> {
    let k = CandidateOpKind::COUNT;
    if alpha.shape() != [super::num_edges(), k] {
        return Err(Error::shape(format!(
            "alpha must be [{}, {k}], got {:?}",
            super::num_edges(),
            alpha.shape()
        )));
    }
    if !alpha.all_finite() {
        return Err(Error::NonFinite("architecture parameters".into()));
    }
    let edges = edge_list();
    // per edge: (chosen op, score)
    let choices: Vec<(CandidateOpKind, f64)> = (0..edges.len())
        .map(|e| {
            let w = edge_softmax(alpha, e);
            let mut best: Option<(usize, f64)> = None;
            for (oi, kind) in CandidateOpKind::ALL.iter().enumerate() {
                if exclude_zero && *kind == CandidateOpKind::Zero {
                    continue;
                }
                // strict > keeps the lowest op index on ties
                if best.map_or(true, |(_, bw)| w[oi] > bw) {
                    best = Some((oi, w[oi]));
                }
            }
            let (oi, score) = best.expect("at least one candidate allowed");
            (CandidateOpKind::ALL[oi], score)
        })
        .collect();
    let mut nodes = [[NodeChoice { op: CandidateOpKind::Zero, src: 0 }; 2]; NUM_INTERMEDIATE_NODES];
    for (j, slot) in nodes.iter_mut().enumerate() {
        let mut ranked: Vec<(usize, f64)> = edges_into(j)
            .map(|e| (e, choices[e].1))
            .collect();
        // stable sort by descending score keeps lower source index on ties
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut keep: Vec<usize> = ranked[..2].iter().map(|(e, _)| *e).collect();
        keep.sort_unstable();
        for (s, e) in slot.iter_mut().zip(keep) {
            *s = NodeChoice { op: choices[e].0, src: edges[e].src };
        }
    }
    Ok(CellGenotype { nodes })
}

/// Discretize both cell kinds into a genotype carrying the given metadata.
pub fn discretize<T: Scalar>(
    alpha_normal: &Tensor<T>,
    alpha_reduction: &Tensor<T>,
    exclude_zero: bool,
    channels: usize,
    blocks: Vec<(String, Vec<CellKind>)>,
) -> Result<Genotype> {
    Ok(Genotype {
        channels,
        blocks,
        normal: discretize_cell(alpha_normal, exclude_zero)?,
        reduction: discretize_cell(alpha_reduction, exclude_zero)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_blocks() -> Vec<(String, Vec<CellKind>)> {
        vec![("feature".into(), vec![CellKind::Normal, CellKind::Reduction])]
    }

    #[test]
    fn all_skip_round_trips() {
        let g = Genotype {
            channels: 8,
            blocks: toy_blocks(),
            normal: CellGenotype::all_skip(),
            reduction: CellGenotype::all_skip(),
        };
        let text = g.serialize();
        let back = Genotype::parse(&text).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn ties_pick_lowest_op_and_sources() {
        let alpha = Tensor::<f64>::zeros(&[14, 5]);
        let cell = discretize_cell(&alpha, true).unwrap();
        for (j, pair) in cell.nodes.iter().enumerate() {
            assert_eq!(pair[0], NodeChoice { op: CandidateOpKind::SepConv1x1, src: 0 }, "node {j}");
            assert_eq!(pair[1], NodeChoice { op: CandidateOpKind::SepConv1x1, src: 1 }, "node {j}");
        }
    }

    #[test]
    fn one_hot_alpha_selects_marked_edges() {
        // put a big value on sep_conv_3x3 for edges (input0, n0) and (input1, n0)
        let mut alpha = Tensor::<f64>::full(&[14, 5], -20.0);
        alpha.as_mut_slice()[0 * 5 + 1] = 20.0;
        alpha.as_mut_slice()[1 * 5 + 1] = 20.0;
        let cell = discretize_cell(&alpha, true).unwrap();
        assert_eq!(cell.nodes[0][0], NodeChoice { op: CandidateOpKind::SepConv3x3, src: 0 });
        assert_eq!(cell.nodes[0][1], NodeChoice { op: CandidateOpKind::SepConv3x3, src: 1 });
    }

    #[test]
    fn zero_dominating_edge_yields_runner_up_when_excluded() {
        let mut alpha = Tensor::<f64>::zeros(&[14, 5]);
        // zero dominates edge 0; skip is runner-up
        alpha.as_mut_slice()[4] = 9.0;
        alpha.as_mut_slice()[3] = 2.0;
        let cell = discretize_cell(&alpha, true).unwrap();
        assert_eq!(cell.nodes[0][0].op, CandidateOpKind::SkipConnection);
        let with_zero = discretize_cell(&alpha, false).unwrap();
        assert_eq!(with_zero.nodes[0][0].op, CandidateOpKind::Zero);
    }

    #[test]
    fn shift_invariance_is_exact_on_random_alpha() {
        use rand::Rng;
        let mut rng = crate::rng::substream(11, "discretize-shift");
        for trial in 0..50 {
            let data: Vec<f64> = (0..70).map(|_| rng.random_range(-2.0..2.0)).collect();
            let alpha = Tensor::from_vec(&[14, 5], data.clone()).unwrap();
            let base = discretize_cell(&alpha, true).unwrap();
            // shift one edge's 5 entries by a constant
            let edge = trial % 14;
            let c: f64 = rng.random_range(-5.0..5.0);
            let mut shifted = data;
            for v in &mut shifted[edge * 5..(edge + 1) * 5] {
                *v += c;
            }
            let alpha2 = Tensor::from_vec(&[14, 5], shifted).unwrap();
            let moved = discretize_cell(&alpha2, true).unwrap();
            assert_eq!(base, moved, "trial {trial}");
        }
    }

    #[test]
    fn parse_rejects_three_edges_per_node() {
        let g = Genotype {
            channels: 8,
            blocks: toy_blocks(),
            normal: CellGenotype::all_skip(),
            reduction: CellGenotype::all_skip(),
        };
        let mut text = g.serialize();
        text.push_str("normal n0: zero(input0)\n");
        let err = Genotype::parse(&text);
        assert!(err.is_err());
    }

    #[test]
    fn parse_rejects_forward_references() {
        let text = "genotype v1 channels=8 layout=feature:N\n\
                    normal n0: skip_connection(input0), skip_connection(n1)\n\
                    normal n1: skip_connection(input0), skip_connection(input1)\n\
                    normal n2: skip_connection(input0), skip_connection(input1)\n\
                    normal n3: skip_connection(input0), skip_connection(input1)\n\
                    reduction n0: skip_connection(input0), skip_connection(input1)\n\
                    reduction n1: skip_connection(input0), skip_connection(input1)\n\
                    reduction n2: skip_connection(input0), skip_connection(input1)\n\
                    reduction n3: skip_connection(input0), skip_connection(input1)\n";
        assert!(Genotype::parse(text).is_err());
    }

    #[test]
    fn random_genotypes_round_trip() {
        use rand::Rng;
        let mut rng = crate::rng::substream(13, "genotype-roundtrip");
        for _ in 0..100 {
            let data: Vec<f64> = (0..70).map(|_| rng.random_range(-3.0..3.0)).collect();
            let an = Tensor::from_vec(&[14, 5], data).unwrap();
            let data: Vec<f64> = (0..70).map(|_| rng.random_range(-3.0..3.0)).collect();
            let ar = Tensor::from_vec(&[14, 5], data).unwrap();
            let g = discretize(&an, &ar, true, 8, toy_blocks()).unwrap();
            let back = Genotype::parse(&g.serialize()).unwrap();
            assert_eq!(g, back);
        }
    }
}

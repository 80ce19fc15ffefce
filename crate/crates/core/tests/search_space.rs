//! Continuous relaxation and cell behavior: the worked mixing examples,
//! shape arithmetic, and supernet/child consistency.

use psnas_core::nn::{Fwd, Mode, ParamStore};
use psnas_core::rng::substream;
use psnas_core::search::{
    ArchParams, Cell, CellGenotype, CellKind, MixWeights, MixedEdge, NodeChoice,
    CandidateOpKind, num_edges,
};
use psnas_core::tensor::check::seeded_uniform;
use psnas_core::{Tensor, Var};

fn supernet_cell(kind: CellKind, channels: usize, seed: u64) -> (ParamStore<f64>, Cell) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = substream(seed, "init");
    let cell =
        Cell::supernet(&mut store, &mut rng, "cell", channels, channels, channels, kind, false).unwrap();
    (store, cell)
}

/// Softmax weights on one edge via the tape, with the rest of the alpha
/// table left at zero.
fn run_single_edge(alpha_row: [f64; 5], x_data: Tensor<f64>, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    // build one mixed edge out of a full supernet cell's first edge
    let (mut store, cell) = supernet_cell(CellKind::Normal, 2, seed);
    let mut rng = substream(seed, "alpha");
    let alpha = ArchParams::init(&mut store, &mut rng);
    {
        let a = store.value_mut(alpha.normal);
        for (i, v) in alpha_row.iter().enumerate() {
            a.as_mut_slice()[i] = *v;
        }
        for v in &mut a.as_mut_slice()[5..] {
            *v = 0.0;
        }
    }
    let psnas_core::search::CellOps::Mixed(edges) = &cell.ops else { unreachable!() };
    let edge: &MixedEdge = &edges[0];
    let mut f = Fwd::new(&mut store, Mode::Train);
    let x = f.tape.constant(x_data);
    let mix = MixWeights::compute(&mut f, alpha.normal).unwrap();
    let out = edge.forward(&mut f, x, mix.rows[0]).unwrap();
    let weights = f.tape.value(mix.rows[0]).clone();
    (f.tape.value(out).clone(), weights)
}

#[test]
fn uniform_alpha_mixes_with_weight_one_fifth() {
    let x = seeded_uniform(&[2, 2, 4, 4], 7, 0.0);
    let (_, weights) = run_single_edge([0.0; 5], x, 1);
    for &w in weights.as_slice() {
        assert!((w - 0.2).abs() < 1e-12, "weight {w}");
    }
}

#[test]
fn mix_weights_sum_to_one_for_random_alpha() {
    use rand::Rng;
    let mut rng = substream(42, "alpha-sum");
    for _ in 0..50 {
        let mut row = [0.0; 5];
        for v in &mut row {
            *v = rng.random_range(-10.0..10.0);
        }
        let x = seeded_uniform(&[1, 2, 2, 2], 9, 0.0);
        let (_, weights) = run_single_edge(row, x, 2);
        let sum: f64 = weights.as_slice().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(weights.as_slice().iter().all(|&w| w > 0.0));
    }
}

#[test]
fn saturated_skip_alpha_returns_identity() {
    let x = seeded_uniform(&[1, 2, 4, 4], 11, 0.0);
    let (out, _) = run_single_edge([0.0, 0.0, 0.0, 20.0, 0.0], x.clone(), 3);
    for (o, e) in out.as_slice().iter().zip(x.as_slice()) {
        let rel = (o - e).abs() / e.abs().max(1.0);
        assert!(rel < 1e-6, "{o} vs {e}");
    }
}

#[test]
fn saturated_zero_alpha_returns_zero_map() {
    let x = seeded_uniform(&[1, 2, 4, 4], 13, 0.0);
    let (out, _) = run_single_edge([0.0, 0.0, 0.0, 0.0, 20.0], x, 4);
    for &o in out.as_slice() {
        assert!(o.abs() < 1e-6, "{o}");
    }
}

#[test]
fn non_finite_alpha_is_rejected() {
    let (mut store, _cell) = supernet_cell(CellKind::Normal, 2, 5);
    let mut rng = substream(5, "alpha");
    let alpha = ArchParams::init(&mut store, &mut rng);
    store.value_mut(alpha.normal).as_mut_slice()[3] = f64::NAN;
    let mut f = Fwd::new(&mut store, Mode::Train);
    assert!(MixWeights::compute(&mut f, alpha.normal).is_err());
}

#[test]
fn all_zero_dominant_alpha_gives_zero_cell_output() {
    let (mut store, cell) = supernet_cell(CellKind::Normal, 2, 6);
    let mut rng = substream(6, "alpha");
    let alpha = ArchParams::init(&mut store, &mut rng);
    {
        let a = store.value_mut(alpha.normal);
        for e in 0..num_edges() {
            for (o, slot) in a.as_mut_slice()[e * 5..(e + 1) * 5].iter_mut().enumerate() {
                *slot = if o == CandidateOpKind::Zero.index() { 1e4 } else { 0.0 };
            }
        }
    }
    let mut f = Fwd::new(&mut store, Mode::Train);
    let x = f.tape.constant(seeded_uniform(&[1, 2, 4, 4], 15, 0.0));
    let mix = MixWeights::compute(&mut f, alpha.normal).unwrap();
    let out = cell.forward(&mut f, x, x, Some(&mix)).unwrap();
    assert_eq!(f.tape.value(out).shape(), &[1, 8, 4, 4]);
    for &v in f.tape.value(out).as_slice() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn all_skip_child_cell_preserves_spatial_size() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = substream(7, "init");
    let g = CellGenotype::all_skip();
    let cell =
        Cell::child(&mut store, &mut rng, "cell", 4, 4, 4, CellKind::Normal, false, &g).unwrap();
    let mut f = Fwd::new(&mut store, Mode::Train);
    let x = f.tape.constant(seeded_uniform(&[1, 4, 6, 6], 17, 0.0));
    let out = cell.forward(&mut f, x, x, None).unwrap();
    assert_eq!(f.tape.value(out).shape(), &[1, 16, 6, 6]);
}

#[test]
fn reduction_cell_halves_sixteen_to_eight() {
    let (mut store, cell) = supernet_cell(CellKind::Reduction, 4, 8);
    let mut rng = substream(8, "alpha");
    let alpha = ArchParams::init(&mut store, &mut rng);
    let mut f = Fwd::new(&mut store, Mode::Train);
    let x = f.tape.constant(seeded_uniform(&[1, 4, 16, 16], 19, 0.0));
    let mix = MixWeights::compute(&mut f, alpha.reduction).unwrap();
    let out = cell.forward(&mut f, x, x, Some(&mix)).unwrap();
    assert_eq!(f.tape.value(out).shape(), &[1, 16, 8, 8]);
}

#[test]
fn child_reduction_cell_halves_resolution() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = substream(9, "init");
    let g = CellGenotype {
        nodes: [
            [
                NodeChoice { op: CandidateOpKind::SepConv3x3, src: 0 },
                NodeChoice { op: CandidateOpKind::SkipConnection, src: 1 },
            ],
            [
                NodeChoice { op: CandidateOpKind::SepConv1x1, src: 1 },
                NodeChoice { op: CandidateOpKind::SepConv5x5, src: 2 },
            ],
            [
                NodeChoice { op: CandidateOpKind::SkipConnection, src: 2 },
                NodeChoice { op: CandidateOpKind::SepConv3x3, src: 3 },
            ],
            [
                NodeChoice { op: CandidateOpKind::Zero, src: 0 },
                NodeChoice { op: CandidateOpKind::SepConv3x3, src: 4 },
            ],
        ],
    };
    let cell =
        Cell::child(&mut store, &mut rng, "cell", 4, 4, 4, CellKind::Reduction, false, &g).unwrap();
    let mut f = Fwd::new(&mut store, Mode::Train);
    let x = f.tape.constant(seeded_uniform(&[1, 4, 16, 16], 21, 0.0));
    let out = cell.forward(&mut f, x, x, None).unwrap();
    assert_eq!(f.tape.value(out).shape(), &[1, 16, 8, 8]);
}

/// The supernet under a one-hot-like alpha must match the extracted child
/// network that shares its weights.
#[test]
fn supernet_with_saturated_alpha_matches_extracted_child() {
    for kind in [CellKind::Normal, CellKind::Reduction] {
        let (mut store, cell) = supernet_cell(kind, 4, 10);
        let mut rng = substream(10, "alpha");
        let alpha = ArchParams::init(&mut store, &mut rng);
        // a non-trivial genotype
        let g = psnas_core::search::Genotype {
            channels: 4,
            blocks: vec![("feature".into(), vec![kind])],
            normal: CellGenotype {
                nodes: [
                    [
                        NodeChoice { op: CandidateOpKind::SepConv3x3, src: 0 },
                        NodeChoice { op: CandidateOpKind::SkipConnection, src: 1 },
                    ],
                    [
                        NodeChoice { op: CandidateOpKind::SepConv1x1, src: 0 },
                        NodeChoice { op: CandidateOpKind::SepConv5x5, src: 2 },
                    ],
                    [
                        NodeChoice { op: CandidateOpKind::SkipConnection, src: 1 },
                        NodeChoice { op: CandidateOpKind::SepConv3x3, src: 3 },
                    ],
                    [
                        NodeChoice { op: CandidateOpKind::SepConv3x3, src: 3 },
                        NodeChoice { op: CandidateOpKind::SkipConnection, src: 4 },
                    ],
                ],
            },
            reduction: CellGenotype {
                nodes: [
                    [
                        NodeChoice { op: CandidateOpKind::SepConv5x5, src: 0 },
                        NodeChoice { op: CandidateOpKind::SkipConnection, src: 1 },
                    ],
                    [
                        NodeChoice { op: CandidateOpKind::SepConv3x3, src: 1 },
                        NodeChoice { op: CandidateOpKind::SepConv1x1, src: 2 },
                    ],
                    [
                        NodeChoice { op: CandidateOpKind::SkipConnection, src: 0 },
                        NodeChoice { op: CandidateOpKind::SepConv3x3, src: 3 },
                    ],
                    [
                        NodeChoice { op: CandidateOpKind::SepConv1x1, src: 2 },
                        NodeChoice { op: CandidateOpKind::SepConv5x5, src: 4 },
                    ],
                ],
            },
        };
        let onehot = ArchParams::one_hot_like::<f64>(&g, kind);
        *store.value_mut(alpha.of(kind)) = onehot;
        let child = cell.extract_child(g.cell(kind)).unwrap();

        let x_data = seeded_uniform(&[2, 4, 8, 8], 23, 0.0);
        let super_out = {
            let mut f = Fwd::new(&mut store, Mode::Train);
            let x = f.tape.constant(x_data.clone());
            let mix = MixWeights::compute(&mut f, alpha.of(kind)).unwrap();
            let out = cell.forward(&mut f, x, x, Some(&mix)).unwrap();
            f.tape.value(out).clone()
        };
        let child_out = {
            let mut f = Fwd::new(&mut store, Mode::Train);
            let x = f.tape.constant(x_data);
            let out = child.forward(&mut f, x, x, None).unwrap();
            f.tape.value(out).clone()
        };
        assert_eq!(super_out.shape(), child_out.shape());
        for (a, b) in super_out.as_slice().iter().zip(child_out.as_slice()) {
            let rel = (a - b).abs() / a.abs().max(1.0);
            assert!(rel < 1e-4, "{kind:?}: {a} vs {b}");
        }
    }
}

/// Gradients flow through the mixing weights into alpha.
#[test]
fn alpha_receives_gradients_through_cell_forward() {
    let (mut store, cell) = supernet_cell(CellKind::Normal, 2, 12);
    let mut rng = substream(12, "alpha");
    let alpha = ArchParams::init(&mut store, &mut rng);
    let mut f = Fwd::new(&mut store, Mode::Train);
    let x = f.tape.constant(seeded_uniform(&[1, 2, 4, 4], 25, 0.0));
    let mix = MixWeights::compute(&mut f, alpha.normal).unwrap();
    let out = cell.forward(&mut f, x, x, Some(&mix)).unwrap();
    let loss: Var = f.tape.mean(out);
    let grads = f.backward(loss).unwrap();
    let ga = grads.get(alpha.normal).expect("alpha gradient");
    assert!(ga.as_slice().iter().any(|&v| v != 0.0));
    assert_eq!(ga.shape(), &[14, 5]);
}

//! Structural properties of the graph layers and the full model on seeded
//! random molecules.

use molegraph::chem::{featurize, MolGraph};
use molegraph::data::TaskKind;
use molegraph::diff::{ParamStore, Tape};
use molegraph::graph::{build_batch, init_super_nodes};
use molegraph::layers::{graph_pool, Mode, SuperNodeConvParams};
use molegraph::model::{build_model, Model, ModelConfig};
use molegraph::synth::random_graph;
use molegraph::Matrix;
use proptest::prelude::*;

mod common;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn trained_like_model(seed: u64, tasks: usize) -> Model {
    let mut model = build_model(ModelConfig::new(tasks, TaskKind::Classification, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with("/b") || p.name.ends_with("beta") {
            let (r, c) = p.value.shape();
            p.value = random_matrix(&mut rng, r, c).scale(0.2);
        }
    }
    model
}

#[test]
fn conv_matches_dense_reference_on_100_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut store = ParamStore::new();
    let p = conv_params(&mut rng, WIDTH_IN, WIDTH_OUT, "gc", &mut store);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let g = random_graph(&mut rng, 2, 12);
        let x = random_matrix(&mut rng, g.atom_count(), WIDTH_IN);
        let batch = batch_of(std::slice::from_ref(&g), std::slice::from_ref(&x));
        let got = conv(&store, &p, &batch, &x);
        let want = dense_conv(&store, &p, &g, &x);
        assert!(close(&got, &want, 1e-12), "{got:?} vs {want:?}");
        worst = worst.max(got.max_abs_diff(&want));
    }
    assert!(worst <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = conv_params(&mut rng, WIDTH_IN, WIDTH_OUT, "gc", &mut store);
        let g = random_graph(&mut rng, 2, 10);
        let x = random_matrix(&mut rng, g.atom_count(), WIDTH_IN);
        let perm = permutation(&mut rng, g.atom_count());
        let gp = g.permuted(&perm).unwrap();
        let xp = permute_rows(&x, &perm);
        let base = conv(&store, &p, &batch_of(&[g], std::slice::from_ref(&x)), &x);
        let moved = conv(&store, &p, &batch_of(&[gp], std::slice::from_ref(&xp)), &xp);
        prop_assert!(close(&permute_rows(&base, &perm), &moved, 1e-12));
    }

    #[test]
    fn model_output_ignores_atom_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = trained_like_model(seed, 3);
        let graphs: Vec<MolGraph> = (0..3).map(|_| random_graph(&mut rng, 2, 9)).collect();
        let shuffled: Vec<MolGraph> = graphs
            .iter()
            .map(|g| g.permuted(&permutation(&mut rng, g.atom_count())).unwrap())
            .collect();
        for mode in [Mode::Eval, Mode::Train] {
            let run = |gs: &[MolGraph]| {
                let feats: Vec<Matrix> = gs.iter().map(featurize).collect();
                let (b, x) = build_batch(&gs.iter().collect::<Vec<_>>(), &feats.iter().collect::<Vec<_>>()).unwrap();
                model.forward(&b, &x, mode).unwrap()
            };
            prop_assert!(close(&run(&graphs), &run(&shuffled), 1e-9));
        }
    }

    #[test]
    fn eval_outputs_ignore_batch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = trained_like_model(seed, 2);
        let graphs: Vec<MolGraph> = (0..5).map(|_| random_graph(&mut rng, 1, 9)).collect();
        let order = permutation(&mut rng, graphs.len());
        let reordered: Vec<&MolGraph> = order.iter().map(|&i| &graphs[i]).collect();
        let all = model.predict(&graphs.iter().collect::<Vec<_>>()).unwrap();
        let moved = model.predict(&reordered).unwrap();
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(moved.row(pos), all.row(i));
            let alone = model.predict(&[&graphs[i]]).unwrap();
            prop_assert_eq!(alone.row(0), all.row(i));
        }
    }

    #[test]
    fn super_node_never_writes_node_features(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gc1 = conv_params(&mut rng, WIDTH_IN, WIDTH_OUT, "gc1", &mut store);
        let gc2 = conv_params(&mut rng, WIDTH_OUT, WIDTH_OUT, "gc2", &mut store);
        let sup = SuperNodeConvParams::register(&mut store, "super", 6, WIDTH_IN, 6, &mut rng).unwrap();
        let graphs: Vec<MolGraph> = (0..3).map(|_| random_graph(&mut rng, 1, 8)).collect();
        let feats: Vec<Matrix> = graphs.iter().map(|g| random_matrix(&mut rng, g.atom_count(), WIDTH_IN)).collect();
        let (batch, x) = build_batch(&graphs.iter().collect::<Vec<_>>(), &feats.iter().collect::<Vec<_>>()).unwrap();

        // nodes only, no super node anywhere
        let plain = {
            let mut t = Tape::new();
            let h = t.leaf(x.clone());
            let h1 = gc1.forward(&mut t, &store, &batch, h).unwrap();
            let h1 = t.relu(h1);
            let h1 = graph_pool(&mut t, &batch, h1).unwrap();
            let h2 = gc2.forward(&mut t, &store, &batch, h1).unwrap();
            t.value(h2).clone()
        };
        // the same node path interleaved with super-node updates from two
        // different super-node states
        for s_init in [init_super_nodes(&batch, 6), random_matrix(&mut rng, batch.graph_count(), 6).scale(1e3)] {
            let mut t = Tape::new();
            let h = t.leaf(x.clone());
            let s = t.leaf(s_init);
            let s1 = sup.forward(&mut t, &store, &batch, h, s).unwrap();
            prop_assert_eq!(t.value(h), &x);
            let h1 = gc1.forward(&mut t, &store, &batch, h).unwrap();
            let h1 = t.relu(h1);
            let h1 = graph_pool(&mut t, &batch, h1).unwrap();
            let _ = t.sum(s1);
            let h2 = gc2.forward(&mut t, &store, &batch, h1).unwrap();
            prop_assert_eq!(t.value(h2), &plain);
        }
    }

    #[test]
    fn pool_properties(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs: Vec<MolGraph> = (0..3).map(|_| random_graph(&mut rng, 1, 10)).collect();
        let feats: Vec<Matrix> = graphs.iter().map(|g| random_matrix(&mut rng, g.atom_count(), 3)).collect();
        let refs: Vec<&Matrix> = feats.iter().collect();
        let (batch, x) = build_batch(&graphs.iter().collect::<Vec<_>>(), &refs).unwrap();
        let mut t = Tape::new();
        let h = t.leaf(x.clone());
        let pooled = graph_pool(&mut t, &batch, h).unwrap();
        let out = t.value(pooled).clone();
        prop_assert_eq!(out.shape(), x.shape());
        for v in 0..x.rows() {
            for c in 0..x.cols() {
                let want = batch.neighbors(v).iter().map(|&u| x.get(u, c)).fold(x.get(v, c), f64::max);
                prop_assert!(out.get(v, c) >= x.get(v, c));
                prop_assert_eq!(out.get(v, c), want);
            }
        }
        // neighbor lists hold genuine atoms of the same molecule only
        for v in 0..batch.node_count() {
            for &u in batch.neighbors(v) {
                prop_assert!(u < batch.node_count());
                prop_assert_eq!(batch.node_owner()[u], batch.node_owner()[v]);
            }
        }
    }

    #[test]
    fn receptive_field_grows_one_hop_per_conv(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let gc1 = conv_params(&mut rng, WIDTH_IN, WIDTH_OUT, "gc1", &mut store);
        let gc2 = conv_params(&mut rng, WIDTH_OUT, WIDTH_OUT, "gc2", &mut store);
        let sup = SuperNodeConvParams::register(&mut store, "super", 4, WIDTH_IN, 4, &mut rng).unwrap();
        // an 8-atom chain: atom 0 is 7 bonds from atom 7
        let g = molegraph::parse_smiles("CCCCCCCC").unwrap();
        let x = random_matrix(&mut rng, 8, WIDTH_IN);
        let run = |x: &Matrix, layers: usize| {
            let batch = batch_of(std::slice::from_ref(&g), std::slice::from_ref(x));
            let mut t = Tape::new();
            let h = t.leaf(x.clone());
            let s = t.leaf(init_super_nodes(&batch, 4));
            let s1 = sup.forward(&mut t, &store, &batch, h, s).unwrap();
            let mut out = gc1.forward(&mut t, &store, &batch, h).unwrap();
            if layers == 2 {
                out = gc2.forward(&mut t, &store, &batch, out).unwrap();
            }
            (t.value(out).clone(), t.value(s1).clone())
        };
        let mut bumped = x.clone();
        for v in bumped.row_mut(0) {
            *v += rng.gen_range(0.5..1.5);
        }
        for layers in [1usize, 2] {
            let (a, sa) = run(&x, layers);
            let (b, sb) = run(&bumped, layers);
            for v in 0..8 {
                let reached = a.row(v) != b.row(v);
                prop_assert_eq!(reached, v <= layers, "layers {} atom {}", layers, v);
            }
            // the super node sees every atom after a single update
            prop_assert!(sa.row(0) != sb.row(0));
        }
    }
}

use graphnad::attack::{inject_trigger, make_er_trigger, poison_dataset, TriggerSpec};
use graphnad::baselines::{prune_graph, smoothed_predict, PruneConfig, SmoothingConfig};
use graphnad::dataset::{load_tu_dataset, split_indices, synth_dataset, write_tu_dataset, Dataset, SplitSpec};
use graphnad::defense::{
    attention_distill_loss, attention_map, normalize_attention, relation_samples, sliced_w2,
};
use graphnad::gnn::{forward, init_params, ActivationTrace, Arch, GnnConfig};
use graphnad::graph::er_random_graph;
use graphnad::Graph;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, p: f64, dim: usize, seed: u64) -> Graph {
    let mut g = er_random_graph(n, p, dim, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    g.features_mut().mapv_inplace(|_| rng.random_range(-1.0..1.0));
    g
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0))
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    perm
}

/// Exact 1D W2 between equal-size samples: RMS gap of the order statistics.
fn exact_w2_1d(a: &[f64], b: &[f64]) -> f64 {
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn attention_is_p_homogeneous(n in 1usize..12, p in 1.0f64..4.0, c in 0.1f64..5.0, seed in any::<u64>()) {
        let g = random_graph(n, 0.4, 5, seed);
        let f = random_matrix(n, 5, seed);
        let a = attention_map(f.view(), &g.degree(), p).unwrap();
        let b = attention_map((&f * c).view(), &g.degree(), p).unwrap();
        for (x, y) in a.0.iter().zip(b.0.iter()) {
            let expect = c.powf(p) * x;
            prop_assert!((y - expect).abs() <= 1e-10 * expect.abs().max(1e-300));
        }
    }

    #[test]
    fn attention_permutes_with_nodes(n in 1usize..12, seed in any::<u64>(), pseed in any::<u64>()) {
        let g = random_graph(n, 0.4, 3, seed);
        let f = random_matrix(n, 4, seed);
        let perm = permutation(n, pseed);
        let h = g.relabel_nodes(&perm).unwrap();
        let mut fp = Array2::zeros(f.raw_dim());
        for i in 0..n {
            fp.row_mut(perm[i]).assign(&f.row(i));
        }
        let a = attention_map(f.view(), &g.degree(), 2.0).unwrap();
        let b = attention_map(fp.view(), &h.degree(), 2.0).unwrap();
        for i in 0..n {
            prop_assert_eq!(a.0[i], b.0[perm[i]]);
        }
    }

    #[test]
    fn normalized_attention_is_unit_or_zero(n in 1usize..12, seed in any::<u64>(), zero in any::<bool>()) {
        let g = random_graph(n, 0.5, 2, seed);
        let f = if zero { Array2::zeros((n, 3)) } else { random_matrix(n, 3, seed) };
        let psi = normalize_attention(&attention_map(f.view(), &g.degree(), 2.0).unwrap());
        let norm = psi.norm();
        prop_assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-12);
        prop_assert!(psi.0.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn attention_loss_is_scale_invariant(n in 2usize..10, seed in any::<u64>(), c in 0.01f64..100.0) {
        let g = random_graph(n, 0.5, 2, seed);
        let t = ActivationTrace::from_layers(vec![random_matrix(n, 3, seed), random_matrix(n, 3, seed ^ 1)]);
        let s = ActivationTrace::from_layers(vec![random_matrix(n, 3, seed ^ 2), random_matrix(n, 3, seed ^ 3)]);
        let d = g.degree();
        let base = attention_distill_loss(&t, &s, &d, 2.0).unwrap();
        prop_assert!(base >= 0.0);
        prop_assert!(attention_distill_loss(&t, &t, &d, 2.0).unwrap().abs() < 1e-12);
        for (tt, ss) in [(t.scaled(c), s.clone()), (t.clone(), s.scaled(c))] {
            let v = attention_distill_loss(&tt, &ss, &d, 2.0).unwrap();
            prop_assert!((v - base).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_is_permutation_equivariant(n in 1usize..12, p in 0.0f64..=1.0, seed in any::<u64>(), pseed in any::<u64>(), gin in any::<bool>()) {
        let arch = if gin { Arch::Gin } else { Arch::Gcn };
        let cfg = GnnConfig::new(arch, 4, 3, seed);
        let params = init_params(&cfg).unwrap();
        let g = random_graph(n, p, 4, seed);
        let perm = permutation(n, pseed);
        let a = forward(&params, &cfg, &g).unwrap();
        let b = forward(&params, &cfg, &g.relabel_nodes(&perm).unwrap()).unwrap();
        for (fa, fb) in a.layers.iter().zip(&b.layers) {
            prop_assert!(fa.iter().all(|&x| x >= 0.0));
            for i in 0..n {
                for c in 0..fa.ncols() {
                    prop_assert!((fa[[i, c]] - fb[[perm[i], c]]).abs() <= 1e-9 * fa[[i, c]].abs().max(1.0));
                }
            }
        }
        for (x, y) in a.logits.iter().zip(b.logits.iter()) {
            prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn sliced_w2_in_one_dimension_is_exact(m in 1usize..30, seed in any::<u64>(), slices in 1usize..6) {
        let a = random_matrix(m, 1, seed);
        let b = random_matrix(m, 1, seed ^ 7);
        let v = sliced_w2(a.view(), b.view(), slices, seed).unwrap();
        let exact = exact_w2_1d(a.as_slice().unwrap(), b.as_slice().unwrap());
        prop_assert!((v - exact).abs() < 1e-12);
    }

    #[test]
    fn sliced_w2_is_a_pseudometric(m in 1usize..20, k in 1usize..20, dim in 1usize..=8, seed in any::<u64>()) {
        let a = random_matrix(m, dim, seed);
        let b = random_matrix(k, dim, seed ^ 3);
        let ab = sliced_w2(a.view(), b.view(), 8, seed).unwrap();
        let ba = sliced_w2(b.view(), a.view(), 8, seed).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert_eq!(sliced_w2(a.view(), a.view(), 8, seed).unwrap(), 0.0);
    }

    #[test]
    fn relation_rows_are_unit_or_zero(n in 1usize..15, c in 1usize..6, seed in any::<u64>()) {
        let fi = random_matrix(n, c, seed);
        let mut fj = random_matrix(n, c, seed ^ 9);
        fj.row_mut(0).assign(&fi.row(0));
        let r = relation_samples(fi.view(), fj.view()).unwrap();
        for (k, row) in r.view().rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if k == 0 {
                prop_assert_eq!(norm, 0.0);
            } else {
                prop_assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn injection_keeps_untouched_edges(n in 6usize..25, p in 0.0f64..=1.0, seed in any::<u64>(), tp in 0.0f64..=1.0) {
        let host = random_graph(n, p, 2, seed);
        let spec = TriggerSpec { trigger_size: 0.25, er_edge_prob: tp, seed, ..Default::default() };
        let trigger = make_er_trigger(&spec, n as f64, 2).unwrap();
        let (g, assignment) = inject_trigger(&host, &trigger, &spec, seed ^ 5).unwrap();
        let chosen = |v: usize| assignment.contains(&v);
        for &(a, b) in host.edges() {
            if !(chosen(a) && chosen(b)) {
                prop_assert!(g.has_edge(a, b));
            }
        }
        for &(a, b) in g.edges() {
            if !(chosen(a) && chosen(b)) {
                prop_assert!(host.has_edge(a, b));
            }
        }
        for i in 0..trigger.num_nodes() {
            for j in (i + 1)..trigger.num_nodes() {
                prop_assert_eq!(trigger.has_edge(i, j), g.has_edge(assignment[i], assignment[j]));
            }
        }
        prop_assert_eq!(g.features(), host.features());
    }

    #[test]
    fn poison_count_is_exact(num in 20usize..80, phi in 0.02f64..=1.0, seed in any::<u64>()) {
        let ds = synth_dataset(num, seed).unwrap();
        let spec = TriggerSpec { injection_ratio: phi, seed, ..Default::default() };
        let expected = (phi * num as f64).round() as usize;
        match poison_dataset(&ds, &spec, ds.avg_nodes()) {
            Ok((poisoned, report)) => {
                prop_assert_eq!(report.poisoned_indices.len(), expected);
                for (&i, a) in report.poisoned_indices.iter().zip(&report.trigger_node_assignments) {
                    prop_assert_eq!(poisoned.graphs[i].label(), spec.target_label);
                    let mut sorted = a.clone();
                    sorted.sort_unstable();
                    sorted.dedup();
                    prop_assert_eq!(sorted.len(), a.len());
                }
            }
            Err(_) => prop_assert_eq!(expected, 0),
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic(num in 40usize..200, seed in any::<u64>(), hold in 0.01f64..0.15) {
        let ds = synth_dataset(num, 3).unwrap();
        let spec = SplitSpec { clean_holdout_fraction: hold, seed, ..Default::default() };
        if let Ok(a) = split_indices(&ds, &spec) {
            prop_assert_eq!(&a, &split_indices(&ds, &spec).unwrap());
            prop_assert_eq!(a.train.len() + a.test.len(), num);
            prop_assert!(a.train.iter().all(|i| a.test.binary_search(i).is_err()));
            prop_assert!(a.clean_holdout.iter().all(|i| a.test.binary_search(i).is_ok()));
            prop_assert_eq!(a.clean_holdout.len(), (hold * num as f64).round() as usize);
        }
    }

    #[test]
    fn pruning_only_removes_nodes(n in 2usize..20, seed in any::<u64>(), tau in -1.0f64..=1.0) {
        let g = random_graph(n, 0.3, 3, seed);
        let pruned = prune_graph(&g, &PruneConfig { cosine_threshold: tau }).unwrap();
        prop_assert!(pruned.num_nodes() >= 1 && pruned.num_nodes() <= n);
        prop_assert!(pruned.num_edges() <= g.num_edges());
    }

    #[test]
    fn smoothing_votes_add_up(seed in any::<u64>(), samples in 1usize..12) {
        let cfg = GnnConfig::new(Arch::Gin, 3, 2, seed);
        let params = init_params(&cfg).unwrap();
        let g = random_graph(10, 0.3, 3, seed);
        let s = SmoothingConfig { num_samples: samples, seed, ..Default::default() };
        let v = smoothed_predict(&params, &cfg, &g, &s).unwrap();
        prop_assert_eq!(v.votes.iter().sum::<usize>(), samples);
        prop_assert!(v.votes[v.class] == *v.votes.iter().max().unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tu_round_trip_is_exact(num in 20usize..40, seed in any::<u64>()) {
        let ds = synth_dataset(num, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tu_dataset(&ds, dir.path()).unwrap();
        let back = load_tu_dataset(dir.path(), &ds.name).unwrap();
        prop_assert_eq!(&back, &ds);
        let again = tempfile::tempdir().unwrap();
        write_tu_dataset(&back, again.path()).unwrap();
        for suffix in ["A", "graph_indicator", "graph_labels", "node_labels"] {
            let name = format!("{}_{suffix}.txt", ds.name);
            prop_assert_eq!(
                std::fs::read(dir.path().join(&name)).unwrap(),
                std::fs::read(again.path().join(&name)).unwrap()
            );
        }
    }

    #[test]
    fn real_valued_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graphs: Vec<Graph> = (0..6)
            .map(|i| {
                let mut g = random_graph(rng.random_range(1..8), 0.5, 3, seed ^ i);
                g.set_label((i % 3) as usize);
                g
            })
            .collect();
        let ds = Dataset::new("real", 3, graphs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_tu_dataset(&ds, dir.path()).unwrap();
        prop_assert_eq!(load_tu_dataset(dir.path(), "real").unwrap(), ds);
    }
}

#[test]
fn constant_attention_is_uniform_over_equal_degrees() {
    // A 4-cycle: every node has degree 2, so equal activations give psi = 1/2 each.
    let g = Graph::new(Array2::zeros((4, 1)), [(0, 1), (1, 2), (2, 3), (0, 3)], 0).unwrap();
    let psi = normalize_attention(&attention_map(Array2::ones((4, 2)).view(), &g.degree(), 2.0).unwrap());
    assert_eq!(psi.0, Array1::from_elem(4, 0.5));
}

use std::collections::BTreeSet;
use std::rc::Rc;

use proptest::prelude::*;

use twohop_core::commgraph::{build_topology, cost_round2, Point};
use twohop_core::diffmath::{Matrix, Tape};
use twohop_core::harness::ExperimentConfig;
use twohop_core::protocol::{gates_from_scores, ProtocolMode};

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y)| [x, y]), 1..max)
}

fn set(s: &[usize]) -> BTreeSet<usize> {
    s.iter().copied().collect()
}

proptest! {
    #[test]
    fn one_hop_is_symmetric_and_two_hop_is_disjoint(p in points(14), range in 0.1f64..2.0) {
        let topo = build_topology(&p, range).unwrap();
        for i in 0..p.len() {
            let n1 = set(topo.one_hop(i));
            prop_assert!(!n1.contains(&i));
            for &j in &n1 {
                prop_assert!(topo.one_hop(j).contains(&i));
            }
            for &k in topo.two_hop(i) {
                prop_assert!(k != i && !n1.contains(&k));
                prop_assert!(!topo.relay_paths(i, k).unwrap().is_empty());
            }
            // closure = one-hop ∪ two-hop, plus i itself once it has a neighbour
            let mut closure = n1.clone();
            closure.extend(topo.two_hop(i));
            if !n1.is_empty() {
                closure.insert(i);
            }
            prop_assert_eq!(set(topo.two_hop_closure(i)), closure);
        }
    }

    #[test]
    fn neighbourhoods_grow_with_range(p in points(12), a in 0.1f64..1.5, extra in 0.0f64..1.0) {
        let small = build_topology(&p, a).unwrap();
        let large = build_topology(&p, a + extra).unwrap();
        for i in 0..p.len() {
            prop_assert!(set(small.one_hop(i)).is_subset(&set(large.one_hop(i))));
            prop_assert!(set(small.two_hop_closure(i)).is_subset(&set(large.two_hop_closure(i))));
        }
        prop_assert!(small.one_hop_links() <= large.one_hop_links());
    }

    #[test]
    fn relabeling_permutes_neighbour_sets(p in points(10), range in 0.2f64..1.5, seed in any::<u64>()) {
        let n = p.len();
        let mut perm: Vec<usize> = (0..n).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let q: Vec<Point> = (0..n).map(|i| p[perm[i]]).collect();
        let a = build_topology(&p, range).unwrap();
        let b = build_topology(&q, range).unwrap();
        for i in 0..n {
            let mapped: BTreeSet<usize> = b.two_hop(i).iter().map(|&k| perm[k]).collect();
            prop_assert_eq!(mapped, set(a.two_hop(perm[i])));
        }
    }

    #[test]
    fn gates_close_as_threshold_rises(scores in prop::collection::vec(0.0f64..1.0, 1..20), t1 in 0.01f64..0.99, dt in 0.0f64..0.5) {
        let t2 = (t1 + dt).min(0.99);
        let low = gates_from_scores(ProtocolMode::Ac2c, &scores, t1).unwrap();
        let high = gates_from_scores(ProtocolMode::Ac2c, &scores, t2).unwrap();
        for (l, h) in low.iter().zip(&high) {
            prop_assert!(!h | l);
        }
    }

    #[test]
    fn opening_a_gate_never_lowers_cost(p in points(10), range in 0.2f64..1.5, bits in prop::collection::vec(any::<bool>(), 10)) {
        let topo = build_topology(&p, range).unwrap();
        let gates: Vec<bool> = bits[..p.len()].to_vec();
        let base = cost_round2(&topo, &gates, ProtocolMode::Ac2c, 32);
        for i in 0..p.len() {
            let mut more = gates.clone();
            more[i] = true;
            prop_assert!(cost_round2(&topo, &more, ProtocolMode::Ac2c, 32) >= base);
        }
    }

    #[test]
    fn attention_weights_sum_to_one(
        rows in 1usize..7,
        width in 1usize..5,
        values in prop::collection::vec(-3.0f64..3.0, 3 * 7 * 5),
        mask in prop::collection::vec(any::<bool>(), 49),
    ) {
        let take = |k: usize| Matrix::from_vec(rows, width, values[k * 35..k * 35 + rows * width].to_vec());
        let adjacency: Vec<Vec<usize>> = (0..rows)
            .map(|i| (0..rows).filter(|&j| j == i || mask[i * 7 + j]).collect())
            .collect();
        let mut t = Tape::new();
        let (q, k, v) = (t.leaf(take(0)).unwrap(), t.leaf(take(1)).unwrap(), t.leaf(take(2)).unwrap());
        let a = t.attention(q, k, v, Rc::new(adjacency.clone()), 0.5).unwrap();
        let weights = t.attention_weights(a).unwrap();
        for (w, adj) in weights.iter().zip(&adjacency) {
            prop_assert_eq!(w.len(), adj.len());
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences(
        a in prop::collection::vec(-1.0f64..1.0, 6),
        b in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        // f(A) = Σ sigmoid(tanh(A·B) ⊙ A·B)
        let f = |t: &mut Tape, am: Matrix| {
            let x = t.leaf(am).unwrap();
            let y = t.constant(Matrix::from_vec(3, 2, b.clone())).unwrap();
            let p = t.matmul(x, y).unwrap();
            let h = t.tanh(p).unwrap();
            let m = t.mul(h, p).unwrap();
            let s = t.sigmoid(m).unwrap();
            (x, t.sum(s).unwrap())
        };
        let mut t = Tape::new();
        let (x, root) = f(&mut t, Matrix::from_vec(2, 3, a.clone()));
        t.backward(root).unwrap();
        let g = t.grad(x).unwrap().clone();
        let eps = 1e-6;
        for i in 0..6 {
            let mut up = a.clone();
            up[i] += eps;
            let mut down = a.clone();
            down[i] -= eps;
            let mut tu = Tape::new();
            let (_, ru) = f(&mut tu, Matrix::from_vec(2, 3, up));
            let mut td = Tape::new();
            let (_, rd) = f(&mut td, Matrix::from_vec(2, 3, down));
            let numeric = (tu.value(ru).item() - td.value(rd).item()) / (2.0 * eps);
            prop_assert!((g.data()[i] - numeric).abs() < 1e-7, "{} vs {}", g.data()[i], numeric);
        }
    }

    #[test]
    fn config_survives_toml_round_trip(
        threshold in 0.01f64..0.99,
        range in 0.1f64..3.0,
        hidden in 1usize..256,
        seeds in prop::collection::vec(0u64..1000, 1..6),
        mode in prop::sample::select(ProtocolMode::ALL.to_vec()),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.threshold = threshold;
        cfg.range = range;
        cfg.hidden = hidden;
        cfg.seeds = seeds;
        cfg.mode = mode;
        let text = cfg.to_toml_string().unwrap();
        prop_assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
    }
}

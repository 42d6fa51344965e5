use std::collections::BTreeSet;

use cfsim_core::graph::{
    CausalGraph, Intervention, Provenance, Variable, VariableKind, VariableSet,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn name(i: usize) -> String {
    format!("v{i}")
}

fn empty_graph(n: usize) -> CausalGraph {
    let vars = (0..n)
        .map(|i| Variable::new(name(i), VariableKind::UserContext, ["a", "b"]).unwrap())
        .collect();
    CausalGraph::new(vars).unwrap()
}

/// Random DAG: a random node order, each forward pair joined with probability `p`.
fn random_dag(n: usize, p: f64, rng: &mut impl Rng) -> (CausalGraph, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut g = empty_graph(n);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in (a + 1)..n {
            if rng.random_bool(p) {
                let (f, t) = (order[a], order[b]);
                g.insert_edge(&name(f), &name(t), Provenance::Prior)
                    .unwrap();
                edges.push((f, t));
            }
        }
    }
    (g, edges)
}

/// Path-enumeration oracle: x and y are d-connected iff some simple trail has
/// every non-collider outside z and every collider in z or with a descendant in z.
fn brute_connected(
    n: usize,
    edges: &[(usize, usize)],
    x: usize,
    y: usize,
    z: &BTreeSet<usize>,
) -> bool {
    let is_edge = |a: usize, b: usize| edges.contains(&(a, b));
    let mut desc = vec![BTreeSet::new(); n];
    for (v, d) in desc.iter_mut().enumerate() {
        let mut stack = vec![v];
        while let Some(u) = stack.pop() {
            if d.insert(u) {
                stack.extend(edges.iter().filter(|e| e.0 == u).map(|e| e.1));
            }
        }
    }
    fn walk(
        path: &mut Vec<usize>,
        y: usize,
        n: usize,
        ok: &dyn Fn(usize, usize, usize) -> bool,
        adj: &dyn Fn(usize, usize) -> bool,
    ) -> bool {
        let last = *path.last().unwrap();
        if last == y {
            return path.windows(3).all(|w| ok(w[0], w[1], w[2]));
        }
        for next in 0..n {
            if adj(last, next) && !path.contains(&next) {
                path.push(next);
                let found = walk(path, y, n, ok, adj);
                path.pop();
                if found {
                    return true;
                }
            }
        }
        false
    }
    let ok = |a: usize, m: usize, b: usize| {
        let collider = is_edge(a, m) && is_edge(b, m);
        if collider {
            desc[m].iter().any(|d| z.contains(d))
        } else {
            !z.contains(&m)
        }
    };
    let adj = |a: usize, b: usize| is_edge(a, b) || is_edge(b, a);
    walk(&mut vec![x], y, n, &ok, &adj)
}

fn subsets_up_to(pool: &[usize], k: usize) -> Vec<BTreeSet<usize>> {
    let mut out = vec![BTreeSet::new()];
    for &p in pool {
        let extended: Vec<BTreeSet<usize>> = out
            .iter()
            .filter(|s| s.len() < k)
            .map(|s| {
                let mut s = s.clone();
                s.insert(p);
                s
            })
            .collect();
        out.extend(extended);
    }
    out
}

#[test]
fn d_separation_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let n = rng.random_range(2..=6);
        let (g, edges) = random_dag(n, 0.4, &mut rng);
        for x in 0..n {
            for y in (x + 1)..n {
                let pool: Vec<usize> = (0..n).filter(|&v| v != x && v != y).collect();
                for z in subsets_up_to(&pool, 3) {
                    let zs = VariableSet::of(&g, z.iter().map(|&v| name(v))).unwrap();
                    let sep = g.d_separated(&name(x), &name(y), &zs).unwrap();
                    assert_eq!(
                        sep,
                        !brute_connected(n, &edges, x, y, &z),
                        "edges {edges:?} x {x} y {y} z {z:?}"
                    );
                    assert_eq!(sep, g.d_separated(&name(y), &name(x), &zs).unwrap());
                }
            }
        }
    }
}

#[test]
fn d_separation_rejects_bad_queries() {
    let g = empty_graph(3);
    assert!(g.d_separated("v0", "v0", &VariableSet::new()).is_err());
    assert!(g
        .d_separated("v0", "v1", &["v1"].into_iter().collect())
        .is_err());
    assert!(g.d_separated("v0", "nope", &VariableSet::new()).is_err());
}

fn parse_dot(dot: &str) -> (BTreeSet<String>, BTreeSet<(String, String, String)>) {
    let mut nodes = BTreeSet::new();
    let mut edges = BTreeSet::new();
    for line in dot.lines().map(str::trim) {
        let Some(body) = line.strip_suffix("];") else {
            continue;
        };
        let (head, attrs) = body.split_once(" [").unwrap();
        let unquote = |s: &str| s.trim().trim_matches('"').to_string();
        match head.split_once(" -> ") {
            Some((a, b)) => {
                edges.insert((
                    unquote(a),
                    unquote(b),
                    attrs.trim_start_matches("style=").to_string(),
                ));
            }
            None => {
                nodes.insert(unquote(head));
            }
        }
    }
    (nodes, edges)
}

proptest! {
    #[test]
    fn insertion_never_creates_a_cycle(n in 2usize..8, pairs in prop::collection::vec((0usize..8, 0usize..8), 0..40)) {
        let mut g = empty_graph(n);
        for (a, b) in pairs {
            let (a, b) = (a % n, b % n);
            let before = g.clone();
            if g.insert_edge(&name(a), &name(b), Provenance::Data).is_err() {
                prop_assert_eq!(&g, &before);
            }
            let order = g.topological_order();
            let pos: Vec<usize> = (0..n).map(|v| order.iter().position(|&o| o == v).unwrap()).collect();
            for e in g.edges() {
                let (f, t) = (g.index_of(&e.from).unwrap(), g.index_of(&e.to).unwrap());
                prop_assert!(pos[f] < pos[t]);
            }
        }
    }

    #[test]
    fn surgery_is_idempotent_and_cuts_only_incoming_edges(seed in any::<u64>(), n in 2usize..8, k in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = random_dag(n, 0.5, &mut rng);
        let targets: BTreeSet<usize> = (0..k).map(|_| rng.random_range(0..n)).collect();
        let i = Intervention::new(&g, targets.iter().map(|&t| (name(t), "b"))).unwrap();
        let once = g.apply_intervention(&i).unwrap();
        prop_assert_eq!(&once.apply_intervention(&i).unwrap(), &once);
        for e in g.edges() {
            let cut = targets.contains(&g.index_of(&e.to).unwrap());
            prop_assert_eq!(once.has_edge(&e.from, &e.to), !cut);
        }
        prop_assert!(once.edge_count() <= g.edge_count());
        let affected = g.affected_variables(&once, &i).unwrap();
        for t in &targets {
            prop_assert!(affected.contains(&name(*t)));
        }
    }

    #[test]
    fn dot_export_parses_back(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut g, _) = random_dag(n, 0.5, &mut rng);
        for e in g.edges() {
            if rng.random_bool(0.5) {
                g.set_provenance(&e.from, &e.to, Provenance::Data).unwrap();
            }
        }
        let (nodes, edges) = parse_dot(&g.export_dot());
        prop_assert_eq!(nodes, g.names().map(String::from).collect::<BTreeSet<_>>());
        let expected: BTreeSet<_> = g
            .edges()
            .into_iter()
            .map(|e| (e.from, e.to, if e.provenance == Provenance::Data { "dashed" } else { "solid" }.to_string()))
            .collect();
        prop_assert_eq!(edges, expected);
    }

    #[test]
    fn graph_json_round_trips(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (g, _) = random_dag(n, 0.5, &mut rng);
        let back: CausalGraph = serde_json::from_str(&serde_json::to_string(&g).unwrap()).unwrap();
        prop_assert_eq!(back, g);
    }
}

#[test]
fn dot_quotes_keyword_names() {
    let g = CausalGraph::new(vec![
        Variable::new("node", VariableKind::FeatureExposure, ["0", "1"]).unwrap(),
        Variable::new("y", VariableKind::BehavioralOutcome, ["0", "1"]).unwrap(),
    ])
    .unwrap()
    .add_edge("node", "y", Provenance::Prior)
    .unwrap();
    let dot = g.export_dot();
    assert!(dot.contains("\"node\" [shape=box];"));
    assert!(dot.contains("\"node\" -> y [style=solid];"));
    assert!(dot.contains("y [shape=diamond];"));
}

#[test]
fn directed_paths_on_a_diamond() {
    let mut g = empty_graph(4);
    for (a, b) in [(0, 1), (0, 2), (1, 3), (2, 3)] {
        g.insert_edge(&name(a), &name(b), Provenance::Prior)
            .unwrap();
    }
    let paths = g.directed_paths("v0", "v3").unwrap();
    assert_eq!(paths.len(), 2);
    assert_eq!(
        paths[0],
        vec![
            ("v0".to_string(), "v1".to_string()),
            ("v1".to_string(), "v3".to_string())
        ]
    );
    assert!(g.directed_paths("v3", "v0").unwrap().is_empty());
}

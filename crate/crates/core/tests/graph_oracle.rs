use std::collections::BTreeSet;

use linkrec::corpus::Repository;
use linkrec::graph::{build_citation_graph, build_repo_graph, compute_tfidf, normalize_adjacency, ContextGraph};
use linkrec::synth::{generate, SynthConfig};
use ndarray::Array2;
use proptest::prelude::*;

fn brute_repo_edges(repos: &[Repository], weights: &[std::collections::BTreeMap<String, f64>], threshold: f64) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for i in 0..repos.len() {
        for j in i + 1..repos.len() {
            let costar = repos[i].starrers.iter().any(|u| repos[j].starrers.contains(u));
            let term = weights[i]
                .iter()
                .any(|(t, &w)| w >= threshold && weights[j].get(t).is_some_and(|&v| v >= threshold));
            if costar || term {
                edges.insert((i, j));
            }
        }
    }
    edges
}

fn dense_reference(graph: &ContextGraph) -> Array2<f64> {
    let n = graph.len();
    let mut a = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && graph.has_edge(i, j) {
                a[[i, j]] = 1.0;
            }
        }
    }
    let d: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (d[i] * d[j]).sqrt())
}

#[test]
fn repo_graph_matches_quadratic_scan_on_200_repos() {
    let synth = generate(&SynthConfig {
        repos: 200,
        ..Default::default()
    })
    .unwrap();
    let repos = &synth.corpus.repos;
    assert_eq!(repos.len(), 200);
    let tfidf = compute_tfidf(repos).unwrap();
    for threshold in [0.0, 0.2, 0.3, 0.5, 1.0] {
        let graph = build_repo_graph(repos, &tfidf, threshold).unwrap();
        let got: BTreeSet<(usize, usize)> = graph.edges().into_iter().collect();
        assert_eq!(got, brute_repo_edges(repos, &tfidf.docs, threshold), "threshold {threshold}");
    }
}

#[test]
fn normalized_matches_dense_reference() {
    let synth = generate(&SynthConfig {
        repos: 200,
        ..Default::default()
    })
    .unwrap();
    let tfidf = compute_tfidf(&synth.corpus.repos).unwrap();
    let graphs = [
        normalize_adjacency(build_repo_graph(&synth.corpus.repos, &tfidf, 0.3).unwrap()),
        normalize_adjacency(build_citation_graph(&synth.corpus.papers)),
    ];
    for g in &graphs {
        let got = g.normalized().unwrap().to_dense();
        let want = dense_reference(g);
        let err = (&got - &want).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err <= 1e-12, "max deviation {err}");
        assert_eq!(got, got.t());
    }
}

#[test]
fn path_graph_entry() {
    let g = normalize_adjacency(ContextGraph::from_edges(vec!["a".into(), "b".into(), "c".into()], [(0, 1), (1, 2)]));
    let a = g.normalized().unwrap();
    assert!((a.get(0, 1) - 1.0 / 6f64.sqrt()).abs() <= 1e-12);
    assert!((a.get(0, 1) - 0.4082).abs() < 1e-4);
    assert!((a.get(1, 1) - 1.0 / 3.0).abs() <= 1e-12);
    assert_eq!(a.get(0, 2), 0.0);
}

proptest! {
    #[test]
    fn degree_weighted_rows_are_fixed_points(n in 1usize..12, raw in prop::collection::vec((0usize..12, 0usize..12), 0..40)) {
        let edges: Vec<(usize, usize)> = raw.into_iter().map(|(i, j)| (i % n, j % n)).filter(|(i, j)| i != j).collect();
        let g = normalize_adjacency(ContextGraph::from_edges((0..n).map(|i| format!("v{i}")).collect(), edges));
        let dense = g.normalized().unwrap().to_dense();
        prop_assert!((&dense - &dense_reference(&g)).iter().all(|v| v.abs() <= 1e-12));
        // sum_j A_hat[i,j] * sqrt(d_j) = sqrt(d_i), with d counting the self loop.
        for i in 0..n {
            let lhs: f64 = (0..n).map(|j| dense[[i, j]] * ((g.degree(j) + 1) as f64).sqrt()).sum();
            prop_assert!((lhs - ((g.degree(i) + 1) as f64).sqrt()).abs() <= 1e-12);
        }
    }
}

//! Central-difference check of the analytic gradients on a small fixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::{BridgeLink, Corpus, EmbeddingTable, Paper, Repository};
use crate::encoder::TagPooling;
use crate::error::Result;
use crate::model::{build_graphs, gradients, loss_only, EmbeddingMode, ModelConfig, ModelInputs, ModelParams, SlateSpec};

/// Everything needed to evaluate the loss on the fixture.
pub struct Fixture {
    pub inputs: ModelInputs,
    pub params: ModelParams,
    pub slates: Vec<SlateSpec>,
    pub bridges: Vec<(usize, usize)>,
    pub margin: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    pub tensors: Vec<TensorError>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn fixture_config() -> ModelConfig {
    ModelConfig {
        embedding_dim: 4,
        abstract_len: 6,
        description_len: 5,
        paper_windows: vec![(2, 3), (3, 2)],
        repo_windows: vec![(2, 2), (3, 2)],
        tag_hidden: 3,
        gcn_hidden: 5,
        gcn_output: 4,
        tag_pooling: TagPooling::Mean,
        bn_eps: 1e-5,
        tfidf_threshold: 0.3,
    }
}

fn words<R: Rng>(rng: &mut R, len: usize) -> Vec<String> {
    (0..len).map(|_| format!("w{}", rng.gen_range(0..13))).collect()
}

/// Six papers, six repositories and two bridge pairs with a seeded vocabulary.
/// Token `w12` has no vector, so out-of-vocabulary handling is exercised too.
pub fn fixture(mode: EmbeddingMode, seed: u64) -> Result<Fixture> {
    let cfg = fixture_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = EmbeddingTable::from_entries(
        cfg.embedding_dim,
        (0..12).map(|i| (format!("w{i}"), (0..cfg.embedding_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())),
    )?;
    let cites: [&[usize]; 6] = [&[1, 2], &[2], &[3], &[], &[0], &[]];
    let papers = (0..6)
        .map(|i| Paper {
            id: format!("p{i}"),
            title: String::new(),
            abstract_tokens: words(&mut rng, [3, 8, 5, 6, 1, 4][i]),
            cited_ids: cites[i].iter().map(|c| format!("p{c}")).collect(),
        })
        .collect();
    let stars: [&[&str]; 6] = [&["a", "b"], &["a"], &["b", "c"], &["c"], &[], &["d"]];
    let repos = (0..6)
        .map(|i| Repository {
            id: format!("r{i}"),
            description_tokens: words(&mut rng, [2, 7, 4, 5, 3, 0][i]),
            tags: match i {
                0 => vec!["w1 w2".into(), "w12".into()],
                1 => vec!["w3".into()],
                3 => vec!["w4 w5 w6".into()],
                _ => vec![],
            },
            starrers: stars[i].iter().map(|s| s.to_string()).collect(),
        })
        .collect();
    let bridges = vec![
        BridgeLink {
            paper_id: "p0".into(),
            repo_id: "r0".into(),
        },
        BridgeLink {
            paper_id: "p1".into(),
            repo_id: "r1".into(),
        },
    ];
    let corpus = Corpus::new(papers, repos, bridges)?;
    let graphs = build_graphs(&corpus, cfg.tfidf_threshold)?;
    let inputs = ModelInputs::new(&corpus, &graphs, &table, &cfg)?;
    let params = ModelParams::init(&cfg, mode, &inputs, seed)?;
    let slates = (0..6)
        .map(|i| SlateSpec {
            paper: i,
            positive: i,
            negatives: (1..4).map(|d| (i + d) % 6).collect(),
        })
        .collect();
    Ok(Fixture {
        inputs,
        params,
        slates,
        bridges: vec![(0, 0), (1, 1)],
        margin: 0.5,
    })
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of the total loss with central differences for
/// every trainable entry.
pub fn check_gradients(fx: &Fixture, step: f64) -> Result<GradCheckReport> {
    let (_, grads) = gradients(&fx.params, &fx.inputs, &fx.slates, &fx.bridges, fx.margin)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .filter(|t| t.trainable)
        .map(|t| (t.name, t.data.to_vec()))
        .collect();
    let mut probe = fx.params.clone();
    let mut report = GradCheckReport {
        step,
        max_rel_error: 0.0,
        checked: 0,
        tensors: Vec::new(),
    };
    for (name, grad) in analytic {
        let mut worst = 0.0f64;
        for (i, &a) in grad.iter().enumerate() {
            let original = tensor_entry(&mut probe, &name, i, None);
            tensor_entry(&mut probe, &name, i, Some(original + step));
            let plus = loss_only(&probe, &fx.inputs, &fx.slates, &fx.bridges, fx.margin)?.total;
            tensor_entry(&mut probe, &name, i, Some(original - step));
            let minus = loss_only(&probe, &fx.inputs, &fx.slates, &fx.bridges, fx.margin)?.total;
            tensor_entry(&mut probe, &name, i, Some(original));
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(a, numeric));
        }
        report.checked += grad.len();
        report.max_rel_error = report.max_rel_error.max(worst);
        report.tensors.push(TensorError {
            name,
            entries: grad.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}

/// Reads entry `i` of the named tensor, optionally overwriting it first.
fn tensor_entry(params: &mut ModelParams, name: &str, i: usize, set: Option<f64>) -> f64 {
    let mut views = params.tensors_mut();
    let t = views.iter_mut().find(|t| t.name == name).expect("tensor names are stable");
    if let Some(v) = set {
        t.data[i] = v;
    }
    t.data[i]
}

/// The bundled check used by the `gradcheck` subcommand.
pub fn run_bundled(step: f64) -> Result<GradCheckReport> {
    let fx = fixture(EmbeddingMode::Fixed, 11)?;
    check_gradients(&fx, step)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixture_passes() {
        let r = run_bundled(1e-5).unwrap();
        for t in &r.tensors {
            assert!(t.max_rel_error < 1e-3, "{} {}", t.name, t.max_rel_error);
        }
        assert!(r.checked > 100);
    }

    fn dead_tensors(fx: &Fixture) -> Vec<String> {
        let (_, g) = gradients(&fx.params, &fx.inputs, &fx.slates, &fx.bridges, fx.margin).unwrap();
        g.tensors()
            .iter()
            .filter(|t| t.trainable && t.data.iter().all(|v| v.abs() < 1e-12))
            .map(|t| t.name.clone())
            .collect()
    }

    #[test]
    fn fixture_exercises_every_layer() {
        // A bias that shifts every fused row equally is cancelled by batch norm.
        let fx = fixture(EmbeddingMode::Fixed, 11).unwrap();
        assert_eq!(dead_tensors(&fx), ["repo_conv.0.bias", "tags.b1"]);
    }

    #[test]
    fn trainable_tokens_pass() {
        for mode in [EmbeddingMode::Trainable, EmbeddingMode::Concat] {
            let fx = fixture(mode, 3).unwrap();
            assert_eq!(dead_tensors(&fx), ["tags.b1"]);
            let r = check_gradients(&fx, 1e-5).unwrap();
            assert!(r.tensors.iter().any(|t| t.name == "tokens"));
            assert!(r.passed(1e-3), "{mode:?}: {:?}", r.tensors);
        }
    }
}

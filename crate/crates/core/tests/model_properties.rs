mod common;

use common::{small_model, small_synth, small_train};
use linkrec::checkpoint::{decode_checkpoint, encode_checkpoint};
use linkrec::encoder::{encode_paper, Mode, RepoEncoder};
use linkrec::model::{build_graphs, embed_all, embedding_objective, EmbeddingMode, ModelInputs, ModelParams, SlateSpec};
use linkrec::trainer::{train, TrainConfig};
use ndarray::{array, Array2};

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[test]
fn projected_convolution_matches_direct_encoders() {
    let synth = small_synth(3);
    let cfg = small_model();
    let graphs = build_graphs(&synth.corpus, cfg.tfidf_threshold).unwrap();
    let inputs = ModelInputs::new(&synth.corpus, &graphs, &synth.embeddings, &cfg).unwrap();
    let params = ModelParams::init(&cfg, EmbeddingMode::Fixed, &inputs, 5).unwrap();
    let pass = params.forward(&inputs, Mode::Train).unwrap();

    let mut direct = Array2::zeros(pass.paper_features().raw_dim());
    for (i, p) in synth.corpus.papers.iter().enumerate() {
        direct.row_mut(i).assign(&encode_paper(p, &synth.embeddings, &params.paper_conv, cfg.abstract_len).unwrap());
    }
    assert!(max_abs_diff(&direct, pass.paper_features()) < 1e-12);

    let enc = RepoEncoder {
        conv: &params.repo_conv,
        tags: &params.tags,
        bn: &params.bn,
        table: &synth.embeddings,
        description_len: cfg.description_len,
        pooling: cfg.tag_pooling,
    };
    let mut fused = Array2::zeros(pass.repo_fused().raw_dim());
    for (i, r) in synth.corpus.repos.iter().enumerate() {
        fused.row_mut(i).assign(&enc.fused(r).unwrap());
    }
    assert!(max_abs_diff(&fused, pass.repo_fused()) < 1e-12);
}

#[test]
fn embeddings_are_unit_rows() {
    let synth = small_synth(4);
    let cfg = small_model();
    let graphs = build_graphs(&synth.corpus, cfg.tfidf_threshold).unwrap();
    let inputs = ModelInputs::new(&synth.corpus, &graphs, &synth.embeddings, &cfg).unwrap();
    let params = ModelParams::init(&cfg, EmbeddingMode::Concat, &inputs, 1).unwrap();
    let (papers, repos) = embed_all(&params, &inputs).unwrap();
    for m in [&papers, &repos] {
        for row in m.vectors.rows() {
            let n = row.dot(&row).sqrt();
            assert!(n == 0.0 || (n - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn no_violations_means_zero_loss_and_zero_gradient() {
    let papers = array![[1.0, 0.0], [0.0, 1.0]];
    let repos = array![[1.0, 0.0], [0.0, 1.0]];
    let slates = vec![
        SlateSpec { paper: 0, positive: 0, negatives: vec![1] },
        SlateSpec { paper: 1, positive: 1, negatives: vec![0] },
    ];
    let (loss, dp, dr) = embedding_objective(&papers, &repos, &slates, &[(0, 1)], 0.5).unwrap();
    assert_eq!(loss.total, 0.0);
    assert!(dp.iter().chain(dr.iter()).all(|&g| g == 0.0));
}

#[test]
fn constraint_gradient_pulls_bridge_pairs_together() {
    let s = 0.5f64.sqrt();
    let papers = array![[1.0, 0.0], [s, s]];
    let repos = array![[0.0, 1.0], [1.0, 0.0], [s, -s]];
    // Paper 0's slate violates the margin; paper 1 only appears in the bridge pair (1, 2).
    let slates = vec![SlateSpec { paper: 0, positive: 0, negatives: vec![1] }];
    let (loss, dp, dr) = embedding_objective(&papers, &repos, &slates, &[(1, 2)], 0.5).unwrap();
    assert!(loss.warp > 0.0);
    let scale = -loss.warp / 2.0;
    for j in 0..2 {
        assert!((dp[[1, j]] - scale * repos[[2, j]]).abs() < 1e-12);
        assert!((dr[[2, j]] - scale * papers[[1, j]]).abs() < 1e-12);
    }
    // A small descent step raises the bridge cosine.
    let before = papers.row(1).dot(&repos.row(2));
    let p = &papers.row(1) - &(&dp.row(1) * 0.1);
    let r = &repos.row(2) - &(&dr.row(2) * 0.1);
    assert!(p.dot(&r) / (p.dot(&p) * r.dot(&r)).sqrt() > before);
}

fn run(cfg: &TrainConfig, seed: u64) -> linkrec::trainer::TrainOutcome {
    let synth = small_synth(seed);
    let graphs = build_graphs(&synth.corpus, small_model().tfidf_threshold).unwrap();
    train(cfg, &small_model(), &synth.corpus, &graphs, &synth.embeddings).unwrap()
}

#[test]
fn history_satisfies_loss_identity() {
    let out = run(&small_train(), 2);
    assert!(!out.history.records.is_empty());
    for r in &out.history.records {
        assert_eq!(r.train_total, (1.0 + r.constraint_error) * r.train_warp);
        assert!((0.0..=1.0).contains(&r.constraint_error));
    }
    let best = out.history.best().unwrap();
    assert_eq!(best.epoch, out.best_epoch);
    assert!(out.history.records.iter().all(|r| r.val_warp >= best.val_warp));
}

#[test]
fn zero_learning_rate_is_a_null_update() {
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs_max: 3,
        ..Default::default()
    };
    let out = run(&cfg, 2);
    let synth = small_synth(2);
    let graphs = build_graphs(&synth.corpus, small_model().tfidf_threshold).unwrap();
    let inputs = ModelInputs::new(&synth.corpus, &graphs, &synth.embeddings, &small_model()).unwrap();
    let mut init = ModelParams::init(&small_model(), EmbeddingMode::Fixed, &inputs, cfg.seed).unwrap();
    init.recalibrate(&inputs).unwrap();
    assert_eq!(out.params, init);
    let losses: Vec<f64> = out.history.records.iter().map(|r| r.val_warp).collect();
    assert!(losses.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn training_is_deterministic() {
    let a = run(&small_train(), 6);
    let b = run(&small_train(), 6);
    assert_eq!(a.history, b.history);
    assert_eq!(encode_checkpoint(&a.params, "x"), encode_checkpoint(&b.params, "x"));
}

#[test]
fn reloaded_checkpoint_reproduces_embeddings() {
    let synth = small_synth(8);
    let cfg = small_model();
    let graphs = build_graphs(&synth.corpus, cfg.tfidf_threshold).unwrap();
    let tc = TrainConfig {
        embedding_mode: EmbeddingMode::Trainable,
        epochs_max: 2,
        ..Default::default()
    };
    let out = train(&tc, &cfg, &synth.corpus, &graphs, &synth.embeddings).unwrap();
    let (params, _) = decode_checkpoint(&encode_checkpoint(&out.params, "h")).unwrap();
    let inputs = ModelInputs::new(&synth.corpus, &graphs, &synth.embeddings, &cfg).unwrap();
    assert_eq!(embed_all(&params, &inputs).unwrap(), embed_all(&out.params, &inputs).unwrap());
}

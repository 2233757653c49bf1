//! Text feature encoders.
//!
//! Abstracts and descriptions go through a bank of 1-D convolutions over the
//! token axis with a rectifier and max-over-time pooling. Repository tags are
//! pooled word vectors fed through two affine layers, added to the
//! description features and batch-normalised.
//!
//! The functions here operate on explicit [`TokenMatrix`] values and are the
//! reference path. Training uses the vocabulary-projected form in
//! [`crate::model`], which produces the same numbers without materialising a
//! token matrix per document.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{to_token_matrix, tokenize, EmbeddingTable, Paper, Repository, TokenMatrix};
use crate::error::{Error, Result};

/// Glorot/Xavier uniform initialisation.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..=limit))
}

/// Small positive start for biases that feed a rectifier, so empty inputs do
/// not sit exactly on its kink.
pub const BIAS_INIT: f64 = 0.01;

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Filters of a single window height.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWindow {
    pub height: usize,
    /// One row per feature map, each of length `height * input_dim`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ConvWindow {
    pub fn maps(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvFilterBank {
    pub input_dim: usize,
    pub windows: Vec<ConvWindow>,
}

impl ConvFilterBank {
    pub fn zeros(input_dim: usize, spec: &[(usize, usize)]) -> Self {
        ConvFilterBank {
            input_dim,
            windows: spec
                .iter()
                .map(|&(height, maps)| ConvWindow {
                    height,
                    weights: Array2::zeros((maps, height * input_dim)),
                    bias: Array1::zeros(maps),
                })
                .collect(),
        }
    }

    pub fn init<R: Rng>(input_dim: usize, spec: &[(usize, usize)], rng: &mut R) -> Self {
        let mut bank = Self::zeros(input_dim, spec);
        for w in &mut bank.windows {
            let fan_in = w.height * input_dim;
            w.weights = glorot(rng, w.maps(), fan_in, fan_in, w.maps());
            w.bias.fill(BIAS_INIT);
        }
        bank
    }

    pub fn output_width(&self) -> usize {
        self.windows.iter().map(ConvWindow::maps).sum()
    }

    pub fn max_height(&self) -> usize {
        self.windows.iter().map(|w| w.height).max().unwrap_or(0)
    }

    pub fn spec(&self) -> Vec<(usize, usize)> {
        self.windows.iter().map(|w| (w.height, w.maps())).collect()
    }
}

/// Feature map `c_i = relu(w . x_{i:i+h-1} + b)` for one filter, `i = 0..n-h`.
pub fn feature_map(matrix: &TokenMatrix, window: &ConvWindow, filter: usize) -> Vec<f64> {
    let n = matrix.rows();
    let h = window.height;
    let w = window.weights.row(filter);
    let b = window.bias[filter];
    (0..=n - h)
        .map(|i| {
            let span = matrix.values.slice(s![i..i + h, ..]);
            let dot: f64 = span.iter().zip(w.iter()).map(|(x, w)| x * w).sum();
            relu(dot + b)
        })
        .collect()
}

pub fn max_pool(map: &[f64]) -> f64 {
    map.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Convolution with max-over-time pooling; output ordered by (window, filter).
pub fn conv_encode(matrix: &TokenMatrix, bank: &ConvFilterBank) -> Result<Array1<f64>> {
    if matrix.cols() != bank.input_dim {
        return Err(Error::Shape(format!(
            "token matrix has {} columns, filter bank expects {}",
            matrix.cols(),
            bank.input_dim
        )));
    }
    let mut out = Vec::with_capacity(bank.output_width());
    for window in &bank.windows {
        if matrix.rows() < window.height {
            return Err(Error::Precondition(format!(
                "text length {} shorter than window height {}",
                matrix.rows(),
                window.height
            )));
        }
        for j in 0..window.maps() {
            out.push(max_pool(&feature_map(matrix, window, j)));
        }
    }
    Ok(Array1::from(out))
}

/// How word vectors inside one tag are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagPooling {
    #[default]
    Mean,
    Sum,
}

/// Word-vector pooling for a (possibly multi-word) tag. OOV words count as zero vectors.
pub fn tag_vector(tag: &str, table: &EmbeddingTable, pooling: TagPooling) -> Array1<f64> {
    let words = tokenize(tag);
    let mut acc = Array1::zeros(table.dim());
    for w in &words {
        acc += &ArrayView1::from(table.lookup(w));
    }
    if pooling == TagPooling::Mean && !words.is_empty() {
        acc /= words.len() as f64;
    }
    acc
}

/// Mean of the per-tag vectors, zero when there are no tags.
pub fn pooled_tags(tags: &[String], table: &EmbeddingTable, pooling: TagPooling) -> Array1<f64> {
    let mut acc = Array1::zeros(table.dim());
    for t in tags {
        acc += &tag_vector(t, table, pooling);
    }
    if !tags.is_empty() {
        acc /= tags.len() as f64;
    }
    acc
}

/// Two affine layers with a rectifier between them.
#[derive(Clone, Debug, PartialEq)]
pub struct TagEncoder {
    pub w0: Array2<f64>,
    pub b0: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
}

impl TagEncoder {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        TagEncoder {
            w0: Array2::zeros((input, hidden)),
            b0: Array1::zeros(hidden),
            w1: Array2::zeros((hidden, output)),
            b1: Array1::zeros(output),
        }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        TagEncoder {
            w0: glorot(rng, input, hidden, input, hidden),
            b0: Array1::from_elem(hidden, BIAS_INIT),
            w1: glorot(rng, hidden, output, hidden, output),
            b1: Array1::zeros(output),
        }
    }

    pub fn output_width(&self) -> usize {
        self.w1.ncols()
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Array1<f64> {
        let hidden = (x.dot(&self.w0) + &self.b0).mapv(relu);
        hidden.dot(&self.w1) + &self.b1
    }
}

pub fn encode_tags(tags: &[String], table: &EmbeddingTable, params: &TagEncoder, pooling: TagPooling) -> Array1<f64> {
    params.forward(pooled_tags(tags, table, pooling).view())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(width: usize, eps: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            eps,
        }
    }

    /// Column mean and (biased) variance of a batch.
    pub fn batch_stats(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        (mean, var)
    }

    /// Normalises rows of `x` with the given statistics.
    pub fn apply(&self, x: &Array2<f64>, mean: &Array1<f64>, var: &Array1<f64>) -> Array2<f64> {
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        ((x - mean) * &inv_std) * &self.gamma + &self.beta
    }

    /// Train mode normalises with batch statistics and does not touch running state;
    /// call [`BatchNorm::update_running`] separately.
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Array2<f64> {
        match mode {
            Mode::Train => {
                let (mean, var) = Self::batch_stats(x);
                self.apply(x, &mean, &var)
            }
            Mode::Infer => self.apply(x, &self.running_mean, &self.running_var),
        }
    }

    /// Exponential moving update; `momentum = 1` replaces the running state.
    pub fn update_running(&mut self, x: &Array2<f64>, momentum: f64) {
        let (mean, var) = Self::batch_stats(x);
        self.running_mean = &self.running_mean * (1.0 - momentum) + &(mean * momentum);
        self.running_var = &self.running_var * (1.0 - momentum) + &(var * momentum);
    }
}

pub struct RepoEncoder<'a> {
    pub conv: &'a ConvFilterBank,
    pub tags: &'a TagEncoder,
    pub bn: &'a BatchNorm,
    pub table: &'a EmbeddingTable,
    pub description_len: usize,
    pub pooling: TagPooling,
}

impl RepoEncoder<'_> {
    /// Description convolution plus tag features, before normalisation.
    pub fn fused(&self, repo: &Repository) -> Result<Array1<f64>> {
        if self.tags.output_width() != self.conv.output_width() {
            return Err(Error::Shape(format!(
                "tag encoder width {} differs from description width {}",
                self.tags.output_width(),
                self.conv.output_width()
            )));
        }
        let m = to_token_matrix(&repo.description_tokens, self.table, self.description_len);
        Ok(conv_encode(&m, self.conv)? + encode_tags(&repo.tags, self.table, self.tags, self.pooling))
    }

    pub fn encode_batch(&self, repos: &[Repository], mode: Mode) -> Result<Array2<f64>> {
        let width = self.conv.output_width();
        let mut fused = Array2::zeros((repos.len(), width));
        for (i, r) in repos.iter().enumerate() {
            fused.row_mut(i).assign(&self.fused(r)?);
        }
        Ok(self.bn.forward(&fused, mode))
    }

    /// Single repository; meaningful in infer mode.
    pub fn encode(&self, repo: &Repository, mode: Mode) -> Result<Array1<f64>> {
        Ok(self
            .encode_batch(std::slice::from_ref(repo), mode)?
            .row(0)
            .to_owned())
    }
}

pub fn encode_paper(paper: &Paper, table: &EmbeddingTable, bank: &ConvFilterBank, abstract_len: usize) -> Result<Array1<f64>> {
    conv_encode(&to_token_matrix(&paper.abstract_tokens, table, abstract_len), bank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table() -> EmbeddingTable {
        EmbeddingTable::from_entries(
            3,
            [
                ("machine", vec![1.0, 0.0, 2.0]),
                ("learning", vec![3.0, 2.0, 0.0]),
                ("graph", vec![-1.0, 0.5, 0.5]),
            ]
            .into_iter()
            .map(|(t, v)| (t.to_string(), v)),
        )
        .unwrap()
    }

    #[test]
    fn feature_map_length() {
        let m = TokenMatrix {
            values: Array2::ones((5, 3)),
        };
        let bank = ConvFilterBank::zeros(3, &[(2, 1)]);
        assert_eq!(feature_map(&m, &bank.windows[0], 0).len(), 4);
    }

    #[test]
    fn max_pool_picks_max() {
        assert_eq!(max_pool(&[1.0, 3.0, 2.0]), 3.0);
    }

    #[test]
    fn zero_filters_pool_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = TokenMatrix {
            values: Array2::from_shape_simple_fn((6, 3), || rng.gen_range(-1.0..1.0)),
        };
        let bank = ConvFilterBank::zeros(3, &[(2, 4), (3, 2)]);
        assert!(conv_encode(&m, &bank).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn short_text_is_precondition_error() {
        let m = TokenMatrix {
            values: Array2::zeros((3, 3)),
        };
        let bank = ConvFilterBank::zeros(3, &[(2, 1), (4, 1)]);
        match conv_encode(&m, &bank) {
            Err(Error::Precondition(msg)) => assert!(msg.contains('4')),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tag_vectors() {
        let t = table();
        let v = tag_vector("machine learning", &t, TagPooling::Mean);
        assert_eq!(v.to_vec(), vec![2.0, 1.0, 1.0]);
        let v = tag_vector("machine learning", &t, TagPooling::Sum);
        assert_eq!(v.to_vec(), vec![4.0, 2.0, 2.0]);
        assert_eq!(tag_vector("graph", &t, TagPooling::Mean).to_vec(), vec![-1.0, 0.5, 0.5]);
        assert_eq!(tag_vector("foo bar", &t, TagPooling::Mean).to_vec(), vec![0.0; 3]);
    }

    #[test]
    fn empty_tags_give_bias_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = TagEncoder::init(3, 4, 5, &mut rng);
        enc.b0 = Array1::from(vec![0.5, -0.5, 1.0, 0.0]);
        enc.b1 = Array1::from(vec![0.1, 0.2, 0.3, 0.4, 0.5]);
        let out = encode_tags(&[], &table(), &enc, TagPooling::Mean);
        let expected = enc.b0.mapv(relu).dot(&enc.w1) + &enc.b1;
        assert_eq!(out, expected);
    }

    #[test]
    fn paper_and_repo_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = EmbeddingTable::new(200);
        let paper_bank = ConvFilterBank::init(200, &[(2, 64), (3, 64), (5, 64), (7, 64)], &mut rng);
        assert_eq!(paper_bank.output_width(), 256);
        let paper = Paper {
            id: "p".into(),
            title: String::new(),
            abstract_tokens: vec![],
            cited_ids: Default::default(),
        };
        let v = encode_paper(&paper, &t, &paper_bank, 200).unwrap();
        assert_eq!(v.len(), 256);
        // All-padding abstract: every pooled value is relu(bias).
        assert!(v.iter().all(|&x| x == BIAS_INIT));

        let repo_bank = ConvFilterBank::init(200, &[(2, 64), (4, 32)], &mut rng);
        let tags = TagEncoder::init(200, 96, repo_bank.output_width(), &mut rng);
        let bn = BatchNorm::new(96, 1e-5);
        let enc = RepoEncoder {
            conv: &repo_bank,
            tags: &tags,
            bn: &bn,
            table: &t,
            description_len: 50,
            pooling: TagPooling::Mean,
        };
        let repo = Repository {
            id: "r".into(),
            description_tokens: vec![],
            tags: vec![],
            starrers: Default::default(),
        };
        assert_eq!(enc.encode(&repo, Mode::Infer).unwrap().len(), 96);
    }

    #[test]
    fn fusion_is_elementwise_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = table();
        let conv = ConvFilterBank::init(3, &[(2, 2), (3, 1)], &mut rng);
        let tags = TagEncoder::init(3, 4, 3, &mut rng);
        let bn = BatchNorm::new(3, 1e-5);
        let enc = RepoEncoder {
            conv: &conv,
            tags: &tags,
            bn: &bn,
            table: &t,
            description_len: 5,
            pooling: TagPooling::Mean,
        };
        let repo = Repository {
            id: "r".into(),
            description_tokens: tokenize("graph machine learning"),
            tags: vec!["machine learning".into()],
            starrers: Default::default(),
        };
        let a = conv_encode(&to_token_matrix(&repo.description_tokens, &t, 5), &conv).unwrap();
        let b = encode_tags(&repo.tags, &t, &tags, TagPooling::Mean);
        let fused = enc.fused(&repo).unwrap();
        for i in 0..3 {
            assert_eq!(fused[i], a[i] + b[i]);
        }
    }

    #[test]
    fn batch_norm_infer_is_deterministic_affine() {
        let mut bn = BatchNorm::new(2, 1e-5);
        let x = Array2::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.0]).unwrap();
        bn.update_running(&x, 1.0);
        let a = bn.forward(&x, Mode::Infer);
        let b = bn.forward(&x, Mode::Infer);
        assert_eq!(a, b);
        // After a full replacement of running state, infer equals train on the same batch.
        assert_eq!(a, bn.forward(&x, Mode::Train));
        let col_mean = a.sum_axis(Axis(0)) / 3.0;
        assert!(col_mean.iter().all(|v| v.abs() < 1e-12));
    }
}

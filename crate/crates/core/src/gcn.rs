//! Two-layer graph convolution towers: `H <- relu(A_hat H W)` per layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::encoder::glorot;
use crate::error::{Error, Result};
use crate::graph::CsrMatrix;

#[derive(Clone, Debug, PartialEq)]
pub struct GcnTower {
    pub weights: Vec<Array2<f64>>,
}

impl GcnTower {
    pub fn zeros(widths: &[usize]) -> Self {
        GcnTower {
            weights: widths.windows(2).map(|w| Array2::zeros((w[0], w[1]))).collect(),
        }
    }

    /// `widths = [input, hidden, output]` for the usual two layers.
    pub fn init<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        GcnTower {
            weights: widths
                .windows(2)
                .map(|w| glorot(rng, w[0], w[1], w[0], w[1]))
                .collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.first().map_or(0, |w| w.nrows())
    }

    pub fn output_width(&self) -> usize {
        self.weights.last().map_or(0, |w| w.ncols())
    }
}

/// Per-layer intermediates needed for the backward pass.
#[derive(Clone, Debug)]
pub struct GcnCache {
    /// `A_hat H^(l)` for each layer.
    pub propagated: Vec<Array2<f64>>,
    /// Pre-activations `A_hat H^(l) W^(l)`.
    pub pre: Vec<Array2<f64>>,
}

pub fn gcn_forward_cached(features: &Array2<f64>, adj: &CsrMatrix, tower: &GcnTower) -> Result<(Array2<f64>, GcnCache)> {
    if features.ncols() != tower.input_width() {
        return Err(Error::Config(format!(
            "feature width {} does not match first GCN layer input {}",
            features.ncols(),
            tower.input_width()
        )));
    }
    if features.nrows() != adj.dim() {
        return Err(Error::Shape(format!(
            "{} feature rows for a graph of {} nodes",
            features.nrows(),
            adj.dim()
        )));
    }
    let mut cache = GcnCache {
        propagated: Vec::with_capacity(tower.weights.len()),
        pre: Vec::with_capacity(tower.weights.len()),
    };
    let mut h = features.clone();
    for w in &tower.weights {
        let m = adj.matmul(&h.view());
        let z = m.dot(w);
        h = z.mapv(crate::encoder::relu);
        cache.propagated.push(m);
        cache.pre.push(z);
    }
    Ok((h, cache))
}

pub fn gcn_forward(features: &Array2<f64>, adj: &CsrMatrix, tower: &GcnTower) -> Result<Array2<f64>> {
    gcn_forward_cached(features, adj, tower).map(|(h, _)| h)
}

/// Returns weight gradients and the gradient with respect to the input features.
pub fn gcn_backward(d_out: &Array2<f64>, adj: &CsrMatrix, tower: &GcnTower, cache: &GcnCache) -> (Vec<Array2<f64>>, Array2<f64>) {
    let mut grads = vec![Array2::zeros((0, 0)); tower.weights.len()];
    let mut d_h = d_out.clone();
    for l in (0..tower.weights.len()).rev() {
        let mut d_z = d_h;
        d_z.zip_mut_with(&cache.pre[l], |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        grads[l] = cache.propagated[l].t().dot(&d_z);
        let d_m = d_z.dot(&tower.weights[l].t());
        // A_hat is symmetric.
        d_h = adj.matmul(&d_m.view());
    }
    (grads, d_h)
}

/// Node vectors in graph order.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub node_ids: Vec<String>,
    pub vectors: Array2<f64>,
    /// Rows that were zero at normalisation time.
    pub zero_rows: usize,
}

impl EmbeddingMatrix {
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.node_ids.iter().position(|n| n == id)
    }

    pub fn width(&self) -> usize {
        self.vectors.ncols()
    }
}

/// Scales every non-zero row to unit length; returns the result and the number of zero rows.
pub fn normalize_rows(m: &Array2<f64>) -> (Array2<f64>, Array1<f64>, usize) {
    let norms = m.map_axis(Axis(1), |row| row.dot(&row).sqrt());
    let mut out = m.clone();
    let mut zeros = 0;
    for (mut row, &n) in out.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        } else {
            zeros += 1;
        }
    }
    (out, norms, zeros)
}

pub fn l2_normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix {
    let (vectors, _, zero_rows) = normalize_rows(&m.vectors);
    EmbeddingMatrix {
        node_ids: m.node_ids,
        vectors,
        zero_rows,
    }
}

/// Backward of row normalisation. Zero rows pass no gradient.
pub fn normalize_rows_backward(d_unit: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(d_unit.raw_dim());
    for i in 0..unit.nrows() {
        let n = norms[i];
        if n > 0.0 {
            let u = unit.row(i);
            let g = d_unit.row(i);
            let proj = u.dot(&g);
            let mut o = out.row_mut(i);
            o.assign(&g);
            o.scaled_add(-proj, &u);
            o.mapv_inplace(|v| v / n);
        }
    }
    out
}

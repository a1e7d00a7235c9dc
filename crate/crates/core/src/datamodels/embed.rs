use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use super::DatamodelSuite;
use crate::corpus::ExampleId;
use crate::error::{Error, Result};

/// Per-example phase-1 weights concatenated over dev examples, with a 2D
/// principal-component projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// `vectors[id]` has length `dev_count * K`, dev-major.
    pub vectors: Vec<Vec<f64>>,
    pub projection: Vec<[f64; 2]>,
}

pub fn export_embeddings(suite: &DatamodelSuite) -> Embeddings {
    let k = suite.k;
    let vectors: Vec<Vec<f64>> = (0..suite.n_train)
        .map(|i| {
            suite
                .phase1
                .iter()
                .flat_map(|m| m.weights[i * k..(i + 1) * k].iter().copied())
                .collect()
        })
        .collect();
    let projection = pca2(&vectors);
    Embeddings { vectors, projection }
}

/// Projection of the mean-centered rows onto the top two principal axes.
/// Each axis is signed so its largest-magnitude component is positive.
fn pca2(rows: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = rows.len();
    let dim = rows.first().map_or(0, |r| r.len());
    if n == 0 || dim == 0 {
        return vec![[0.0, 0.0]; n];
    }
    let mut x = DMatrix::from_fn(n, dim, |i, j| rows[i][j]);
    for j in 0..dim {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let cov = x.transpose() * &x;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut axes = Vec::new();
    for &c in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(c).clone_owned();
        let lead = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if lead < 0.0 {
            v.neg_mut();
        }
        axes.push(v);
    }
    (0..n)
        .map(|i| {
            let mut p = [0.0; 2];
            for (a, v) in axes.iter().enumerate() {
                p[a] = x.row(i).transpose().dot(v);
            }
            p
        })
        .collect()
}

#[derive(Serialize)]
struct EmbeddingLine<'a> {
    id: ExampleId,
    embedding: &'a [f64],
    projection: [f64; 2],
}

pub fn save_embeddings(emb: &Embeddings, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (id, (v, p)) in emb.vectors.iter().zip(&emb.projection).enumerate() {
        let line = EmbeddingLine {
            id,
            embedding: v,
            projection: *p,
        };
        writeln!(w, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::datamodels::{Datamodel, SuiteConfig};

    fn suite(n: usize, k: usize, devs: usize, f: impl Fn(usize, usize) -> f64) -> DatamodelSuite {
        let phase1 = (0..devs)
            .map(|d| {
                let mut m = Datamodel::zeros(n, k, d);
                for (x, w) in m.weights.iter_mut().enumerate() {
                    *w = f(d, x);
                }
                m
            })
            .collect();
        DatamodelSuite {
            config: SuiteConfig::default(),
            n_train: n,
            k,
            phase1,
            phase2: BTreeMap::new(),
        }
    }

    #[test]
    fn dimension_is_dev_times_k() {
        let e = export_embeddings(&suite(5, 4, 100, |d, x| (d * 31 + x * 7) as f64 % 5.0));
        assert!(e.vectors.iter().all(|v| v.len() == 400));
        assert_eq!(e.projection.len(), 5);
    }

    #[test]
    fn identical_weights_identical_embeddings() {
        // Examples 1 and 3 share every weight.
        let e = export_embeddings(&suite(4, 2, 3, |d, x| {
            let id = if x / 2 == 3 { 1 } else { x / 2 };
            (d + 1) as f64 * (id * 2 + x % 2) as f64
        }));
        assert_eq!(e.vectors[1], e.vectors[3]);
        assert_eq!(e.projection[1], e.projection[3]);
    }

    #[test]
    fn projection_is_centered() {
        let e = export_embeddings(&suite(9, 3, 4, |d, x| ((d * 13 + x * 29) % 11) as f64 - 4.0));
        for a in 0..2 {
            let m: f64 = e.projection.iter().map(|p| p[a]).sum::<f64>() / 9.0;
            assert!(m.abs() < 1e-10);
        }
    }
}

//! Singular values by one-sided Jacobi, and two effective-rank measures.

use std::fmt::Write as _;

use serde::Serialize;

use crate::adapters::AdapterWeights;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TAU: f64 = 0.01;
const JACOBI_TOL: f64 = 1e-12;
const MAX_SWEEPS: usize = 80;

/// Singular values of an `[n × m]` matrix in descending order, `min(n, m)` of them.
///
/// One-sided (Hestenes) Jacobi on the columns: pairs are rotated until every
/// column pair is orthogonal to `1e-12` relative to the product of their norms.
pub fn svd_values<T: Scalar>(m: &Tensor<T>) -> Result<Vec<f64>> {
    if m.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "svd needs a matrix, got {:?}",
            m.shape()
        )));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (r, c) = m.dims2();
    // Columns as contiguous vectors; use the transpose when it has fewer columns.
    let (rows, cols) = if c <= r { (r, c) } else { (c, r) };
    let mut col: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            (0..rows)
                .map(|i| {
                    let x = if c <= r { m.at(i, j) } else { m.at(j, i) };
                    x.to_f64().expect("finite")
                })
                .collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&col[p], &col[p]);
                let beta = dot(&col[q], &col[q]);
                let gamma = dot(&col[p], &col[q]);
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = col.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (a, b) = (*x, *y);
                    *x = cs * a - sn * b;
                    *y = sn * a + cs * b;
                }
            }
        }
        if !rotated {
            let mut s: Vec<f64> = col.iter().map(|v| dot(v, v).sqrt()).collect();
            s.sort_by(|a, b| b.total_cmp(a));
            return Ok(s);
        }
    }
    Err(Error::SvdNoConvergence {
        sweeps: MAX_SWEEPS,
        residual,
    })
}

/// Roy–Vetterli effective rank: `exp(H(p))` with `p_i = σ_i / Σσ`.
pub fn effective_rank_shannon(sigma: &[f64]) -> Result<f64> {
    let total: f64 = sigma.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Contract(
            "effective rank of an all-zero spectrum".into(),
        ));
    }
    // A flat spectrum has erank equal to its support size; skip the rounding.
    let mut nonzero = sigma.iter().filter(|&&s| s > 0.0);
    let first = nonzero.next().copied();
    if nonzero.clone().all(|&s| Some(s) == first) {
        return Ok(sigma.iter().filter(|&&s| s > 0.0).count() as f64);
    }
    let h: f64 = sigma
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let p = s / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// Number of singular values strictly above `tau · σ_1`.
pub fn cutoff_rank(sigma: &[f64], tau: f64) -> usize {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    sigma.iter().filter(|&&s| s > tau * top).count()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub layer: String,
    pub singular_values: Vec<f64>,
    pub erank_shannon: f64,
    pub cutoff_rank: usize,
    pub tau: f64,
}

pub fn rank_report<T: Scalar>(layer: &str, m: &Tensor<T>, tau: f64) -> Result<RankReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Params(format!(
            "cutoff threshold must be in (0,1), got {tau}"
        )));
    }
    let singular_values = svd_values(m)?;
    let erank_shannon = effective_rank_shannon(&singular_values)?;
    let cutoff_rank = cutoff_rank(&singular_values, tau);
    Ok(RankReport {
        layer: layer.to_owned(),
        singular_values,
        erank_shannon,
        cutoff_rank,
        tau,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerRank {
    pub layer: String,
    pub sigma_count: usize,
    pub report: std::result::Result<RankReport, String>,
}

/// Per-layer reports on adapter deltas plus means over the layers that succeeded.
#[derive(Clone, Debug, Serialize)]
pub struct RankAnalysis {
    pub tau: f64,
    pub layers: Vec<LayerRank>,
    pub mean_erank: Option<f64>,
    pub mean_cutoff: Option<f64>,
}

impl RankAnalysis {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,sigma_count,erank_shannon,cutoff_rank,tau\n");
        for l in &self.layers {
            match &l.report {
                Ok(r) => writeln!(
                    out,
                    "{},{},{},{},{}",
                    l.layer, l.sigma_count, r.erank_shannon, r.cutoff_rank, self.tau
                ),
                Err(_) => writeln!(out, "{},{},NaN,0,{}", l.layer, l.sigma_count, self.tau),
            }
            .expect("write to string");
        }
        let fmt = |v: Option<f64>| v.map_or("NaN".to_owned(), |x| x.to_string());
        let ok = self.layers.iter().filter(|l| l.report.is_ok()).count();
        writeln!(
            out,
            "MEAN,{ok},{},{},{}",
            fmt(self.mean_erank),
            fmt(self.mean_cutoff),
            self.tau
        )
        .expect("write to string");
        out
    }
}

/// Analyzes `ΔW` of every adapted layer in 64-bit. Zero deltas are reported as
/// per-layer errors and left out of the means.
pub fn analyze_adapter<T: Scalar>(adapters: &AdapterWeights<T>, tau: f64) -> Result<RankAnalysis> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Params(format!(
            "cutoff threshold must be in (0,1), got {tau}"
        )));
    }
    let wide = adapters.cast::<f64>();
    let mut layers = Vec::new();
    for &(layer, target) in wide.layers.keys() {
        let name = format!("{layer}.{target}");
        let delta = wide.delta_matrix(layer, target)?;
        let (r, c) = delta.dims2();
        let report = rank_report(&name, &delta, tau).map_err(|e| e.to_string());
        layers.push(LayerRank {
            layer: name,
            sigma_count: r.min(c),
            report,
        });
    }
    let ok: Vec<&RankReport> = layers
        .iter()
        .filter_map(|l| l.report.as_ref().ok())
        .collect();
    let mean = |f: &dyn Fn(&RankReport) -> f64| {
        (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
    };
    let mean_erank = mean(&|r| r.erank_shannon);
    let mean_cutoff = mean(&|r| r.cutoff_rank as f64);
    Ok(RankAnalysis {
        tau,
        layers,
        mean_erank,
        mean_cutoff,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterSpec, Target};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, m: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * m)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Tensor::new(vec![n, m], data).unwrap()
    }

    #[test]
    fn diagonal() {
        let m = Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0]]).unwrap();
        let s = svd_values(&m).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
        let m = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, -4.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(svd_values(&m).unwrap(), vec![4.0, 1.0]);
    }

    #[test]
    fn frobenius_identity_and_shapes() {
        for (n, m, seed) in [(20, 20, 1), (7, 13, 2), (31, 5, 3), (64, 64, 4)] {
            let a = random(n, m, seed);
            let s = svd_values(&a).unwrap();
            assert_eq!(s.len(), n.min(m));
            assert!(s.windows(2).all(|w| w[0] >= w[1]) && s.iter().all(|&x| x >= 0.0));
            let fro2: f64 = a.data().iter().map(|x| x * x).sum();
            let ss: f64 = s.iter().map(|x| x * x).sum();
            assert!(((ss - fro2) / fro2).abs() < 1e-8);
        }
    }

    #[test]
    fn orthogonal_invariance() {
        // Q from Gram–Schmidt on a random matrix.
        let n = 12;
        let g = random(n, n, 10);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for j in 0..n {
            let mut v: Vec<f64> = (0..n).map(|i| g.at(i, j)).collect();
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
        let qt = Tensor::new(vec![n, n], q.concat()).unwrap();
        let m = random(n, 8, 11);
        let a = svd_values(&m).unwrap();
        let b = svd_values(&qt.matmul(&m).unwrap()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-8);
        }
    }

    #[test]
    fn rank_deficient() {
        let u = random(10, 2, 5);
        let v = random(2, 9, 6);
        let s = svd_values(&u.matmul(&v).unwrap()).unwrap();
        assert!(s[2] / s[0] < 1e-10, "{s:?}");
    }

    #[test]
    fn erank_examples() {
        assert_eq!(effective_rank_shannon(&[2.5; 7]).unwrap(), 7.0);
        assert_eq!(effective_rank_shannon(&[1.0, 0.0, 0.0]).unwrap(), 1.0);
        let e = effective_rank_shannon(&[3.0, 1.0]).unwrap();
        assert!((e - 1.7548).abs() < 1e-3);
        assert!(effective_rank_shannon(&[0.0, 0.0]).is_err());
        let s = [4.0, 2.0, 1.0, 0.5];
        let scaled: Vec<f64> = s.iter().map(|x| x * 1e-4).collect();
        assert!(
            (effective_rank_shannon(&s).unwrap() - effective_rank_shannon(&scaled).unwrap()).abs()
                < 1e-12
        );
    }

    #[test]
    fn cutoff_examples() {
        assert_eq!(cutoff_rank(&[1.0, 0.5, 0.001], 0.01), 2);
        assert_eq!(cutoff_rank(&[1.0, 0.9999, 0.5], 0.99999), 1);
        assert_eq!(cutoff_rank(&[0.0, 0.0], 0.5), 0);
        assert_eq!(cutoff_rank(&[], 0.5), 0);
    }

    #[test]
    fn synthetic_adapter_erank() {
        let config = ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            ..Default::default()
        };
        let spec = AdapterSpec {
            rank: 4,
            alpha: 4.0,
            targets: vec![Target::Wq, Target::Wv],
            ..AdapterSpec::lora(4)
        };
        let mut w = AdapterWeights::<f32>::init(&spec, &config, 0).unwrap();
        // Wq: delta = diag(1,1,1,0,...) via A = [I3 0; 0], B = [I3 0].
        let l = w.layers.get_mut(&(0, Target::Wq)).unwrap();
        l.a = Tensor::zeros(&[8, 4]);
        l.b = Tensor::zeros(&[4, 8]);
        for i in 0..3 {
            l.a.data_mut()[i * 4 + i] = 1.0;
            l.b.data_mut()[i * 8 + i] = 1.0;
        }
        let analysis = analyze_adapter(&w, DEFAULT_TAU).unwrap();
        let q = &analysis.layers[0];
        assert_eq!(q.layer, "0.wq");
        let r = q.report.as_ref().unwrap();
        assert!((r.erank_shannon - 3.0).abs() < 1e-9);
        assert_eq!(r.cutoff_rank, 3);
        assert!(analysis.layers[1].report.is_err());
        assert!((analysis.mean_erank.unwrap() - 3.0).abs() < 1e-9);
        let csv = analysis.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "layer,sigma_count,erank_shannon,cutoff_rank,tau");
        assert!(lines[3].starts_with("MEAN,1,"));
    }

    #[test]
    fn fresh_adapter_has_no_mean() {
        let config = ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 8,
            ..Default::default()
        };
        let w = AdapterWeights::<f32>::init(&AdapterSpec::lora(2), &config, 0).unwrap();
        let a = analyze_adapter(&w, DEFAULT_TAU).unwrap();
        assert_eq!(a.layers.len(), 4);
        assert!(a.layers.iter().all(|l| l.report.is_err()));
        assert_eq!(a.mean_erank, None);
    }
}

//! Unlearning and sample-quality metrics over generated point sets.

use std::collections::BTreeMap;
use std::fmt;

use crate::diffusion::{sample_finals, GaussianPolicy};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rewards::Classifier;
use crate::rng;

const SYMMETRY_TOL: f64 = 1e-9;
const FD_RIDGE: f64 = 1e-6;

/// Fraction of samples whose predicted class is not `target`.
pub fn unlearning_accuracy(samples: &[f64], clf: &Classifier, target: usize) -> Result<f64> {
    let n = row_count(samples, clf.data_dim())?;
    let hits = clf.predict(samples)?.iter().filter(|&&c| c != target).count();
    Ok(hits as f64 / n as f64)
}

/// Per-class fraction of samples classified as their own prompt class.
pub fn per_class_accuracy(by_class: &BTreeMap<usize, Vec<f64>>, clf: &Classifier) -> Result<BTreeMap<usize, f64>> {
    if by_class.is_empty() {
        return Err(Error::usage("no retain classes to evaluate"));
    }
    by_class
        .iter()
        .map(|(&c, xs)| {
            let n = row_count(xs, clf.data_dim())?;
            let hits = clf.predict(xs)?.iter().filter(|&&p| p == c).count();
            Ok((c, hits as f64 / n as f64))
        })
        .collect()
}

/// Unweighted mean over classes of [`per_class_accuracy`].
pub fn retain_accuracy(by_class: &BTreeMap<usize, Vec<f64>>, clf: &Classifier) -> Result<f64> {
    let acc = per_class_accuracy(by_class, clf)?;
    Ok(acc.values().sum::<f64>() / acc.len() as f64)
}

fn row_count(xs: &[f64], d: usize) -> Result<usize> {
    if xs.is_empty() {
        return Err(Error::usage("empty sample set"));
    }
    if d == 0 || xs.len() % d != 0 {
        return Err(Error::shape("samples", format!("multiple of {d}"), xs.len()));
    }
    Ok(xs.len() / d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// `dim x dim`, unbiased.
    pub cov: Tensor,
    pub n: usize,
}

/// Sample mean and unbiased covariance of `n x dim` features.
pub fn feature_stats(samples: &[f64], dim: usize) -> Result<FeatureStats> {
    let n = row_count(samples, dim)?;
    if n < 2 {
        return Err(Error::usage("feature statistics need at least two samples"));
    }
    let mut mean = vec![0.0; dim];
    for row in samples.chunks_exact(dim) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; dim * dim];
    for row in samples.chunks_exact(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in 0..dim {
                cov[i * dim + j] += di * (row[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    for i in 0..dim {
        for j in 0..i {
            let s = 0.5 * (cov[i * dim + j] + cov[j * dim + i]);
            cov[i * dim + j] = s;
            cov[j * dim + i] = s;
        }
    }
    Ok(FeatureStats {
        mean,
        cov: Tensor::from_parts_unchecked(vec![dim, dim], cov),
        n,
    })
}

fn check_symmetric(m: &Tensor) -> Result<usize> {
    let n = m.rows();
    if m.shape().len() != 2 || m.cols() != n {
        return Err(Error::shape("square matrix", "n x n", format!("{:?}", m.shape())));
    }
    let d = m.data();
    let scale = d.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for i in 0..n {
        for j in 0..i {
            if (d[i * n + j] - d[j * n + i]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::usage(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(n)
}

/// Eigenvalues and column eigenvectors (`q[i * n + k]` is component `i` of
/// vector `k`) of a symmetric matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(m: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = check_symmetric(m)?;
    let mut a = m.data().to_vec();
    let mut q = vec![0.0; n * n];
    (0..n).for_each(|i| q[i * n + i] = 1.0);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let total: f64 = a.iter().map(|v| v * v).sum();
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for r in p + 1..n {
                let apr = a[p * n + r];
                if apr == 0.0 {
                    continue;
                }
                let theta = (a[r * n + r] - a[p * n + p]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akr) = (a[k * n + p], a[k * n + r]);
                    a[k * n + p] = c * akp - s * akr;
                    a[k * n + r] = s * akp + c * akr;
                }
                for k in 0..n {
                    let (apk, ark) = (a[p * n + k], a[r * n + k]);
                    a[p * n + k] = c * apk - s * ark;
                    a[r * n + k] = s * apk + c * ark;
                }
                for k in 0..n {
                    let (qkp, qkr) = (q[k * n + p], q[k * n + r]);
                    q[k * n + p] = c * qkp - s * qkr;
                    q[k * n + r] = s * qkp + c * qkr;
                }
            }
        }
    }
    Ok(((0..n).map(|i| a[i * n + i]).collect(), q))
}

/// `Q sqrt(max(Λ, 0)) Qᵀ` for a symmetric matrix.
pub fn matrix_sqrt_psd(m: &Tensor) -> Result<Tensor> {
    let n = check_symmetric(m)?;
    let (vals, q) = symmetric_eigen(m)?;
    let roots: Vec<f64> = vals.iter().map(|v| v.max(0.0).sqrt()).collect();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = (0..n).map(|k| q[i * n + k] * roots[k] * q[j * n + k]).sum();
            s[i * n + j] = v;
            s[j * n + i] = v;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![n, n], s))
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                out[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    out
}

fn ridge(m: &Tensor) -> Vec<f64> {
    let n = m.rows();
    let mut d = m.data().to_vec();
    (0..n).for_each(|i| d[i * n + i] += FD_RIDGE);
    d
}

/// `‖μ_r − μ_g‖² + tr(Σ_r + Σ_g − 2 (Σ_r Σ_g)^{1/2})` with `1e-6 I` added to
/// both covariances, clamped at zero.
pub fn frechet_distance(r: &FeatureStats, g: &FeatureStats) -> Result<f64> {
    let n = r.mean.len();
    if g.mean.len() != n || r.cov.rows() != n || g.cov.rows() != n {
        return Err(Error::shape("frechet_distance", n, g.mean.len()));
    }
    let (sr, sg) = (ridge(&r.cov), ridge(&g.cov));
    // tr sqrt(Σr Σg) = tr sqrt(S Σg S) with S = sqrt(Σr), which is symmetric
    let s = matrix_sqrt_psd(&Tensor::from_parts_unchecked(vec![n, n], sr.clone()))?;
    let mut inner = matmul(&matmul(s.data(), &sg, n), s.data(), n);
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inner[i * n + j] + inner[j * n + i]);
            inner[i * n + j] = v;
            inner[j * n + i] = v;
        }
    }
    let (vals, _) = symmetric_eigen(&Tensor::from_parts_unchecked(vec![n, n], inner))?;
    let tr_sqrt: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    let dmu: f64 = r.mean.iter().zip(&g.mean).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr: f64 = (0..n).map(|i| sr[i * n + i] + sg[i * n + i]).sum();
    Ok((dmu + tr - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ua: f64,
    pub ira: f64,
    pub fd: f64,
    pub per_class_acc: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "run_id,method,epoch,ua,ira,fd";

    pub fn csv_row(&self, run_id: &str, method: &str, epoch: usize) -> String {
        format!("{run_id},{method},{epoch},{},{},{}", self.ua, self.ira, self.fd)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "unlearning accuracy  {:.4}", self.ua)?;
        writeln!(f, "retain accuracy      {:.4}", self.ira)?;
        writeln!(f, "frechet distance     {:.4}", self.fd)?;
        for (c, a) in &self.per_class_acc {
            writeln!(f, "  class {c}: {a:.4}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub forget_samples: usize,
    pub retain_samples: usize,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            forget_samples: 200,
            retain_samples: 100,
            seed: 7,
        }
    }
}

/// Samples the policy under the protocol and scores it.
///
/// UA is measured on samples prompted with `target`; IRA and the per-class
/// accuracies on every other class; FD compares the retain-class samples with
/// `reference` (statistics of real retain-class data).
pub fn evaluate<P: GaussianPolicy + ?Sized>(
    policy: &P,
    clf: &Classifier,
    target: usize,
    classes: usize,
    reference: &FeatureStats,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    if target >= classes || classes < 2 {
        return Err(Error::usage(format!("target class {target} needs at least one other class out of {classes}")));
    }
    let mut prompts = vec![target; protocol.forget_samples];
    for c in (0..classes).filter(|&c| c != target) {
        prompts.extend(std::iter::repeat_n(c, protocol.retain_samples));
    }
    let xs = sample_finals(policy, &prompts, rng::derive(protocol.seed, "eval"), 0)?;
    let d = policy.data_dim();
    let (forget, retain) = xs.split_at(protocol.forget_samples * d);
    let mut by_class = BTreeMap::new();
    for (c, rows) in (0..classes).filter(|&c| c != target).zip(retain.chunks(protocol.retain_samples * d)) {
        by_class.insert(c, rows.to_vec());
    }
    let per_class_acc = per_class_accuracy(&by_class, clf)?;
    Ok(EvalReport {
        ua: unlearning_accuracy(forget, clf, target)?,
        ira: per_class_acc.values().sum::<f64>() / per_class_acc.len() as f64,
        fd: frechet_distance(reference, &feature_stats(retain, d)?)?,
        per_class_acc,
    })
}

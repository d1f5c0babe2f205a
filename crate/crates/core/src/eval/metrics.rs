use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};

pub const CONTRASTIVE_MARGIN: f64 = 10.0;
pub const R_PRECISION_POOL: usize = 32;
pub const DIVERSITY_SUBSET: usize = 64;
pub const CI_RESAMPLES: usize = 20;
/// Diagonal shrinkage added when a covariance has fewer samples than dims.
pub const FID_RIDGE: f64 = 1e-6;
/// Eigenvalues of the covariance product below `-FID_NEGATIVE_TOL · max(1, λ_max)`
/// are treated as a numerical failure; smaller negatives are clamped to 0.
pub const FID_NEGATIVE_TOL: f64 = 1e-8;

/// `(1−y)·D² + y·max(0, margin−D)²` for one pair; `mismatched` is `y = 1`.
pub fn contrastive_pair(c: &[f64], m: &[f64], mismatched: bool, margin: f64) -> f64 {
    let d = euclidean(c, m);
    if mismatched {
        (margin - d).max(0.0).powi(2)
    } else {
        d * d
    }
}

/// Batch mean of the pairwise contrastive loss on the tape. `c` and `m` are
/// `[B, F]`; `mismatched[i]` labels row `i`.
pub fn contrastive_loss(tape: &mut Tape, c: Var, m: Var, mismatched: &[bool], margin: f64) -> Result<Var> {
    let b = tape.shape(c)[0];
    if tape.shape(c) != tape.shape(m) || tape.shape(c).len() != 2 || mismatched.len() != b {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{:?} vs {:?} with {} labels", tape.shape(c), tape.shape(m), mismatched.len()),
        ));
    }
    let diff = tape.sub(c, m)?;
    let sq = tape.square(diff)?;
    let d2 = tape.sum_last(sq)?;
    // tiny offset keeps the sqrt gradient finite for identical features
    let d2_safe = tape.add_scalar(d2, 1e-12)?;
    let d = tape.sqrt(d2_safe)?;
    let gap = tape.scale(d, -1.0)?;
    let gap = tape.add_scalar(gap, margin)?;
    let hinge = tape.relu(gap)?;
    let hinge = tape.square(hinge)?;
    let pos = tape.constant(Tensor::new(&[b], mismatched.iter().map(|&y| if y { 0.0 } else { 1.0 }).collect())?);
    let neg = tape.constant(Tensor::new(&[b], mismatched.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect())?);
    let a = tape.mul(d2, pos)?;
    let h = tape.mul(hinge, neg)?;
    let per = tape.add(a, h)?;
    tape.mean(per)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn rows(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [n, f] => Ok((n, f)),
        ref s => Err(Error::shape(op, format!("features must be [N, F], got {s:?}"))),
    }
}

/// Mean and 95% normal-approximation half-width `1.96·σ/√n` over resamples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub ci95: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
        } else {
            0.0
        };
        Self {
            mean,
            ci95: 1.96 * var.sqrt() / n.sqrt(),
        }
    }

    pub fn exact(value: f64) -> Self {
        Self { mean: value, ci95: 0.0 }
    }
}

/// Top-1/2/3 retrieval accuracy of each motion's matched condition among
/// itself plus `pool − 1` random mismatched conditions. Ties count against
/// the match.
pub fn r_precision<R: Rng + ?Sized>(cond: &Tensor, motion: &Tensor, pool: usize, rng: &mut R) -> Result<[f64; 3]> {
    let (n, f) = rows(cond, "r_precision")?;
    if motion.shape() != [n, f] {
        return Err(Error::shape("r_precision", format!("{:?} vs {:?}", cond.shape(), motion.shape())));
    }
    if pool == 0 || n < pool {
        return Err(Error::Sampling(format!("{n} conditions cannot fill a pool of {pool}")));
    }
    let mut hits = [0usize; 3];
    for i in 0..n {
        let matched = euclidean(motion.row(i), cond.row(i));
        let beaten = sample(rng, n - 1, pool - 1)
            .iter()
            .map(|j| if j >= i { j + 1 } else { j })
            .filter(|&j| euclidean(motion.row(i), cond.row(j)) <= matched)
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if beaten <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

/// [`r_precision`] repeated `resamples` times with fresh distractor pools.
pub fn r_precision_ci<R: Rng + ?Sized>(
    cond: &Tensor,
    motion: &Tensor,
    pool: usize,
    resamples: usize,
    rng: &mut R,
) -> Result<[Estimate; 3]> {
    let runs = (0..resamples.max(1))
        .map(|_| r_precision(cond, motion, pool, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok([0, 1, 2].map(|k| Estimate::from_samples(&runs.iter().map(|r| r[k]).collect::<Vec<_>>())))
}

fn mean_cov(x: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (n, f) = rows(x, "fid")?;
    if n < 2 {
        return Err(Error::Sampling(format!("FID needs at least 2 samples, got {n}")));
    }
    let m = DMatrix::from_row_slice(n, f, x.data());
    let mean = DVector::from_iterator(f, m.column_iter().map(|c| c.mean()));
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    if n <= f {
        log::warn!("FID: {n} samples for {f} dims; adding ridge {FID_RIDGE}");
        for i in 0..f {
            cov[(i, i)] += FID_RIDGE;
        }
    }
    Ok((mean, cov))
}

fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, &b| a.max(b));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -FID_NEGATIVE_TOL * scale {
            return Err(Error::Sampling(format!("covariance has eigenvalue {v}")));
        }
        *v = v.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussian fits of two `[N, F]` feature sets.
/// `Tr((Σ_r Σ_g)^½)` is evaluated as `Tr((Σ_r^½ Σ_g Σ_r^½)^½)`, which is
/// symmetric PSD and has the same spectrum.
pub fn fid(real: &Tensor, generated: &Tensor) -> Result<f64> {
    let (_, f) = rows(real, "fid")?;
    if rows(generated, "fid")?.1 != f {
        return Err(Error::shape("fid", format!("{:?} vs {:?}", real.shape(), generated.shape())));
    }
    let (mu_r, cov_r) = mean_cov(real)?;
    let (mu_g, cov_g) = mean_cov(generated)?;
    let sr = psd_sqrt(&cov_r)?;
    let inner = &sr * &cov_g * &sr;
    let cross = psd_sqrt(&inner)?.trace();
    let value = (mu_r - mu_g).norm_squared() + cov_r.trace() + cov_g.trace() - 2.0 * cross;
    Ok(value.max(0.0))
}

/// Mean distance between two disjoint random subsets of size `s_d`.
pub fn diversity<R: Rng + ?Sized>(features: &Tensor, s_d: usize, rng: &mut R) -> Result<f64> {
    let (n, _) = rows(features, "diversity")?;
    if s_d == 0 || n < 2 * s_d {
        return Err(Error::Sampling(format!("diversity needs {} features, got {n}", 2 * s_d)));
    }
    let idx = sample(rng, n, 2 * s_d).into_vec();
    let total: f64 = (0..s_d)
        .map(|i| euclidean(features.row(idx[i]), features.row(idx[s_d + i])))
        .sum();
    Ok(total / s_d as f64)
}

pub fn diversity_ci<R: Rng + ?Sized>(features: &Tensor, s_d: usize, resamples: usize, rng: &mut R) -> Result<Estimate> {
    let runs = (0..resamples.max(1))
        .map(|_| diversity(features, s_d, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&runs))
}

/// Average pairwise distance over ordered pairs of `[T, W]` sequences:
/// `1/(N(N−1)) Σ_i Σ_{j≠i} sqrt(Σ_t ‖s_t^i − s_t^j‖²)`.
pub fn apd(motions: &[Tensor]) -> Result<f64> {
    let n = motions.len();
    if n < 2 {
        return Err(Error::Sampling(format!("APD is undefined for {n} sequences")));
    }
    let shape = motions[0].shape();
    if shape.len() != 2 || motions.iter().any(|m| m.shape() != shape) {
        return Err(Error::shape("apd", "sequences must share [T, W]"));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += 2.0 * euclidean(motions[i].data(), motions[j].data());
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// The four evaluation metrics, in table column order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub top1: Estimate,
    pub top2: Estimate,
    pub top3: Estimate,
    pub fid: f64,
    pub diversity: Estimate,
    pub apd: f64,
}

impl MetricReport {
    /// Flat JSON object: each estimate becomes `name` and `name_ci95`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "top1": self.top1.mean,
            "top1_ci95": self.top1.ci95,
            "top2": self.top2.mean,
            "top2_ci95": self.top2.ci95,
            "top3": self.top3.mean,
            "top3_ci95": self.top3.ci95,
            "fid": self.fid,
            "diversity": self.diversity.mean,
            "diversity_ci95": self.diversity.ci95,
            "apd": self.apd,
        })
    }

    pub fn table_header() -> String {
        format!(
            "{:<16} {:>16} {:>16} {:>16} {:>10} {:>16} {:>10}",
            "Method", "Top1", "Top2", "Top3", "FID", "Diversity", "APD"
        )
    }

    pub fn table_row(&self, label: &str) -> String {
        let e = |x: Estimate| format!("{:.3}±{:.3}", x.mean, x.ci95);
        format!(
            "{:<16} {:>16} {:>16} {:>16} {:>10.3} {:>16} {:>10.3}",
            label,
            e(self.top1),
            e(self.top2),
            e(self.top3),
            self.fid,
            e(self.diversity),
            self.apd
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_pair_cases() {
        assert_eq!(contrastive_pair(&[1.0, 2.0], &[1.0, 2.0], false, 10.0), 0.0);
        assert_eq!(contrastive_pair(&[0.0], &[12.0], true, 10.0), 0.0);
        assert_eq!(contrastive_pair(&[0.0, 0.0], &[0.0, 4.0], true, 10.0), 36.0);
        assert_eq!(contrastive_pair(&[0.0, 0.0], &[3.0, 4.0], false, 10.0), 25.0);
    }

    #[test]
    fn estimate_of_constant_has_zero_width() {
        let e = Estimate::from_samples(&[0.5; 20]);
        assert_eq!((e.mean, e.ci95), (0.5, 0.0));
    }
}

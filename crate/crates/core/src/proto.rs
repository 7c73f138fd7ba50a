//! Prototype models fitted over pooled frame embeddings: a diagonal Gaussian
//! mixture trained with EM, and Lloyd's K-means for comparison. Their
//! per-frame posteriors serve as pseudo labels.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::binio::{read_file, write_file, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::numgrad::Array;
use crate::rng::Rng;

pub const VARIANCE_FLOOR: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const PSEUDO_MAGIC: &[u8] = b"PMAMPSL";
const PSEUDO_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeKind {
    Gmm,
    Kmeans,
}

impl std::str::FromStr for PrototypeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" => Ok(Self::Gmm),
            "kmeans" => Ok(Self::Kmeans),
            other => Err(Error::Config(format!("unknown prototype kind '{other}'"))),
        }
    }
}

/// Diagonal Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeModel {
    pub priors: Vec<f64>,
    pub means: Array,
    pub variances: Array,
}

/// Per-frame responsibilities, `T × K`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMatrix {
    pub gamma: Array,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_dim(op: &'static str, z: &Array, d: usize) -> Result<()> {
    if z.cols() != d {
        return Err(Error::Dimension {
            op,
            left: z.shape().to_vec(),
            right: vec![d],
        });
    }
    Ok(())
}

impl PrototypeModel {
    pub fn new(priors: Vec<f64>, means: Array, variances: Array) -> Result<Self> {
        let (k, d) = means.dims2();
        if priors.len() != k || variances.dims2() != (k, d) || k == 0 {
            return Err(Error::Dimension {
                op: "prototype model",
                left: vec![priors.len(), k, d],
                right: variances.shape().to_vec(),
            });
        }
        if priors.iter().any(|&p| !(p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Numerical("mixture priors are not a distribution".into()));
        }
        if variances.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Numerical("mixture variances must be positive".into()));
        }
        Ok(Self {
            priors,
            means,
            variances,
        })
    }

    pub fn components(&self) -> usize {
        self.priors.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    /// `log p(θ_k) + log N(z_t | μ_k, Σ_k)` for every frame and component.
    pub fn log_joint(&self, z: &Array) -> Result<Array> {
        check_dim("log_joint", z, self.dim())?;
        let (k, d) = self.means.dims2();
        let consts: Vec<f64> = (0..k)
            .map(|j| {
                let logdet: f64 = self.variances.row(j).iter().map(|v| v.ln()).sum();
                self.priors[j].ln() - 0.5 * (d as f64 * LN_2PI + logdet)
            })
            .collect();
        let inv_var: Vec<f64> = self.variances.data().iter().map(|v| 1.0 / v).collect();
        let mut out = Array::zeros(&[z.rows(), k]);
        for t in 0..z.rows() {
            let zt = z.row(t);
            for j in 0..k {
                let mu = self.means.row(j);
                let iv = &inv_var[j * d..(j + 1) * d];
                let mut q = 0.0;
                for i in 0..d {
                    let diff = zt[i] - mu[i];
                    q += diff * diff * iv[i];
                }
                out.set(t, j, consts[j] - 0.5 * q);
            }
        }
        Ok(out)
    }

    pub fn responsibilities(&self, z: &Array) -> Result<PseudoLabelMatrix> {
        let mut lj = self.log_joint(z)?;
        for t in 0..lj.rows() {
            let row = lj.row_mut(t);
            let norm = log_sum_exp(row);
            for v in row.iter_mut() {
                *v = (*v - norm).exp();
            }
        }
        Ok(PseudoLabelMatrix { gamma: lj })
    }

    pub fn log_likelihood(&self, z: &Array) -> Result<f64> {
        let lj = self.log_joint(z)?;
        Ok((0..lj.rows()).map(|t| log_sum_exp(lj.row(t))).sum())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.u32(self.components() as u32);
        e.u32(self.dim() as u32);
        e.f64s(&self.priors);
        e.f64s(self.means.data());
        e.f64s(self.variances.data());
        e.buf
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut d = Decoder::new(buf, path);
        let k = d.u32()? as usize;
        let dim = d.u32()? as usize;
        let priors = d.f64s(k)?;
        let means = Array::new(&[k, dim], d.f64s(k * dim)?)?;
        let variances = Array::new(&[k, dim], d.f64s(k * dim)?)?;
        d.finish()?;
        Self::new(priors, means, variances).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

impl PseudoLabelMatrix {
    pub fn frames(&self) -> usize {
        self.gamma.rows()
    }

    pub fn components(&self) -> usize {
        self.gamma.cols()
    }

    /// Index of the largest entry per frame, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.frames())
            .map(|t| {
                let row = self.gamma.row(t);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::default();
        e.bytes(PSEUDO_MAGIC);
        e.u32(PSEUDO_VERSION);
        e.u32(self.frames() as u32);
        e.u32(self.components() as u32);
        e.f64s(self.gamma.data());
        e.buf
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut d = Decoder::new(buf, path);
        d.magic(PSEUDO_MAGIC)?;
        let version = d.u32()?;
        if version != PSEUDO_VERSION {
            return Err(d.err(format!("unsupported pseudo-label version {version}")));
        }
        let t = d.u32()? as usize;
        let k = d.u32()? as usize;
        let gamma = Array::new(&[t, k], d.f64s(t * k)?)?;
        d.finish()?;
        for r in 0..t {
            let row = gamma.row(r);
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(d.err(format!("frame {r} is not a distribution")));
            }
        }
        Ok(Self { gamma })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding; returns row indices of the chosen centers.
pub fn kmeans_plus_plus(z: &Array, k: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    let n = z.rows();
    if n < k || k == 0 {
        return Err(Error::Data(format!("{n} frames cannot seed {k} prototypes")));
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    Ok(chosen)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub variance_floor: f64,
    /// Largest number of frames the mixture is fitted on.
    pub subsample_cap: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            variance_floor: VARIANCE_FLOOR,
            subsample_cap: 50_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit {
    pub model: PrototypeModel,
    /// Log-likelihood before each M-step, then of the final parameters.
    pub log_likelihood: Vec<f64>,
}

fn column_stats(z: &Array) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = z.dims2();
    let mut mean = vec![0.0; d];
    for t in 0..n {
        for (m, v) in mean.iter_mut().zip(z.row(t)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for t in 0..n {
        for i in 0..d {
            let diff = z.get(t, i) - mean[i];
            var[i] += diff * diff;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    (mean, var)
}

pub fn fit_gmm(z: &Array, k: usize, rng: &mut Rng, cfg: &GmmConfig) -> Result<GmmFit> {
    if !(cfg.variance_floor > 0.0) {
        return Err(Error::Parameter("variance floor must be positive".into()));
    }
    let (n, d) = z.dims2();
    if n < k || k == 0 {
        return Err(Error::Data(format!("{n} frames cannot fit {k} mixture components")));
    }
    if !z.all_finite() {
        return Err(Error::Numerical("non-finite embedding passed to EM".into()));
    }
    let seeds = kmeans_plus_plus(z, k, rng)?;
    let (_, global_var) = column_stats(z);
    let floor = cfg.variance_floor;
    let mut model = PrototypeModel {
        priors: vec![1.0 / k as f64; k],
        means: z.select_rows(&seeds),
        variances: Array::new(
            &[k, d],
            (0..k).flat_map(|_| global_var.iter().map(|v| v.max(floor))).collect(),
        )?,
    };
    let mut trace = Vec::new();
    for _ in 0..cfg.max_iters {
        // E-step
        let mut gamma = model.log_joint(z)?;
        let mut ll = 0.0;
        for t in 0..n {
            let row = gamma.row_mut(t);
            let norm = log_sum_exp(row);
            ll += norm;
            row.iter_mut().for_each(|v| *v = (*v - norm).exp());
        }
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            if (ll - prev).abs() <= cfg.tol * prev.abs() {
                break;
            }
        } else {
            trace.push(ll);
        }
        // M-step, fixed summation order
        let mut nk = vec![0.0; k];
        let mut sum = vec![0.0; k * d];
        for t in 0..n {
            let zt = z.row(t);
            for j in 0..k {
                let g = gamma.get(t, j);
                nk[j] += g;
                for i in 0..d {
                    sum[j * d + i] += g * zt[i];
                }
            }
        }
        let total: f64 = nk.iter().sum();
        for j in 0..k {
            model.priors[j] = nk[j] / total;
            if nk[j] <= 1e-300 {
                // collapsed component keeps its old shape with zero weight
                continue;
            }
            for i in 0..d {
                model.means.set(j, i, sum[j * d + i] / nk[j]);
            }
        }
        let mut sq = vec![0.0; k * d];
        for t in 0..n {
            let zt = z.row(t);
            for j in 0..k {
                let g = gamma.get(t, j);
                let mu = model.means.row(j);
                for i in 0..d {
                    let diff = zt[i] - mu[i];
                    sq[j * d + i] += g * diff * diff;
                }
            }
        }
        for j in 0..k {
            if nk[j] <= 1e-300 {
                continue;
            }
            for i in 0..d {
                model.variances.set(j, i, (sq[j * d + i] / nk[j]).max(floor));
            }
        }
    }
    let final_ll = model.log_likelihood(z)?;
    if trace.len() == cfg.max_iters || trace.is_empty() {
        trace.push(final_ll);
    }
    if !final_ll.is_finite() {
        return Err(Error::Numerical("mixture log-likelihood is not finite".into()));
    }
    Ok(GmmFit {
        model,
        log_likelihood: trace,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansModel {
    pub centroids: Array,
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub model: KMeansModel,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia: Vec<f64>,
}

impl KMeansModel {
    /// Nearest centroid per frame, ties to the lowest index.
    pub fn assign(&self, z: &Array) -> Result<Vec<usize>> {
        check_dim("kmeans assign", z, self.centroids.cols())?;
        Ok((0..z.rows())
            .map(|t| {
                let mut best = (0, f64::INFINITY);
                for j in 0..self.centroids.rows() {
                    let dist = sq_dist(z.row(t), self.centroids.row(j));
                    if dist < best.1 {
                        best = (j, dist);
                    }
                }
                best.0
            })
            .collect())
    }

    pub fn one_hot(&self, z: &Array) -> Result<PseudoLabelMatrix> {
        let k = self.centroids.rows();
        let mut gamma = Array::zeros(&[z.rows(), k]);
        for (t, j) in self.assign(z)?.into_iter().enumerate() {
            gamma.set(t, j, 1.0);
        }
        Ok(PseudoLabelMatrix { gamma })
    }

    /// Mixture summary of the clustering (cluster fractions, per-cluster
    /// variances) for persistence in the prototype file format.
    pub fn summary(&self, z: &Array, floor: f64) -> Result<PrototypeModel> {
        let (k, d) = self.centroids.dims2();
        let assign = self.assign(z)?;
        let mut counts = vec![0usize; k];
        let mut sq = vec![0.0; k * d];
        for (t, &j) in assign.iter().enumerate() {
            counts[j] += 1;
            for i in 0..d {
                let diff = z.get(t, i) - self.centroids.get(j, i);
                sq[j * d + i] += diff * diff;
            }
        }
        let n = z.rows().max(1) as f64;
        let priors = counts.iter().map(|&c| c as f64 / n).collect();
        let variances = (0..k * d)
            .map(|idx| {
                let c = counts[idx / d];
                if c == 0 {
                    1.0
                } else {
                    (sq[idx] / c as f64).max(floor)
                }
            })
            .collect();
        PrototypeModel::new(priors, self.centroids.clone(), Array::new(&[k, d], variances)?)
    }
}

pub fn fit_kmeans(z: &Array, k: usize, rng: &mut Rng, max_iters: usize) -> Result<KMeansFit> {
    let (n, d) = z.dims2();
    if n < k || k == 0 {
        return Err(Error::Data(format!("{n} frames cannot form {k} clusters")));
    }
    let seeds = kmeans_plus_plus(z, k, rng)?;
    let mut model = KMeansModel {
        centroids: z.select_rows(&seeds),
    };
    let mut inertia = Vec::new();
    let mut prev_assign: Option<Vec<usize>> = None;
    for _ in 0..max_iters.max(1) {
        let mut assign = model.assign(z)?;
        // re-seed empty clusters with the frame farthest from its centroid
        loop {
            let mut counts = vec![0usize; k];
            assign.iter().for_each(|&j| counts[j] += 1);
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let mut far = (0, -1.0);
            for t in 0..n {
                if counts[assign[t]] < 2 {
                    continue;
                }
                let dist = sq_dist(z.row(t), model.centroids.row(assign[t]));
                if dist > far.1 {
                    far = (t, dist);
                }
            }
            model.centroids.row_mut(empty).copy_from_slice(z.row(far.0));
            assign[far.0] = empty;
        }
        inertia.push(
            assign
                .iter()
                .enumerate()
                .map(|(t, &j)| sq_dist(z.row(t), model.centroids.row(j)))
                .sum(),
        );
        if prev_assign.as_ref() == Some(&assign) {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (t, &j) in assign.iter().enumerate() {
            counts[j] += 1;
            for i in 0..d {
                sums[j * d + i] += z.get(t, i);
            }
        }
        for j in 0..k {
            for i in 0..d {
                model.centroids.set(j, i, sums[j * d + i] / counts[j] as f64);
            }
        }
        prev_assign = Some(assign);
    }
    Ok(KMeansFit { model, inertia })
}

/// A fitted prototype model of either kind.
#[derive(Clone, Debug)]
pub enum FittedPrototypes {
    Gmm(PrototypeModel),
    Kmeans(KMeansModel),
}

impl FittedPrototypes {
    /// Prototype vectors compared against predictions in the masked loss.
    pub fn means(&self) -> &Array {
        match self {
            Self::Gmm(m) => &m.means,
            Self::Kmeans(m) => &m.centroids,
        }
    }

    pub fn pseudo_labels(&self, z: &Array) -> Result<PseudoLabelMatrix> {
        match self {
            Self::Gmm(m) => m.responsibilities(z),
            Self::Kmeans(m) => m.one_hot(z),
        }
    }
}

/// Fits `kind` on the frames of `clips` (uniformly subsampled to the cap)
/// and labels every frame of every clip.
pub fn build_pseudo_labels(
    clips: &[Array],
    kind: PrototypeKind,
    k: usize,
    rng: &mut Rng,
    cfg: &GmmConfig,
) -> Result<(FittedPrototypes, Vec<PseudoLabelMatrix>)> {
    let refs: Vec<&Array> = clips.iter().collect();
    let mut pooled = Array::vstack(&refs)?;
    if pooled.rows() > cfg.subsample_cap {
        let mut idx = sample(rng, pooled.rows(), cfg.subsample_cap).into_vec();
        idx.sort_unstable();
        pooled = pooled.select_rows(&idx);
    }
    let fitted = match kind {
        PrototypeKind::Gmm => FittedPrototypes::Gmm(fit_gmm(&pooled, k, rng, cfg)?.model),
        PrototypeKind::Kmeans => FittedPrototypes::Kmeans(fit_kmeans(&pooled, k, rng, cfg.max_iters)?.model),
    };
    let labels = clips
        .iter()
        .map(|c| fitted.pseudo_labels(c))
        .collect::<Result<Vec<_>>>()?;
    Ok((fitted, labels))
}

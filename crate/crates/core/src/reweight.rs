//! Image priors, k-means clustering and per-cluster sample weights.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Frame;

pub const NUM_PRIORS: usize = 5;
pub const KMEANS_ITERS: usize = 50;
/// Radial frequency, in cycles per pixel, above which energy counts as sharp.
pub const SHARP_CUTOFF: f64 = 0.25;

pub type PriorVector = [f64; NUM_PRIORS];

/// `[mean, std, texture, spectral sharpness, target count]`.
pub fn prior_features(image: &Frame, n_points: usize) -> PriorVector {
    let d = image.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let flat = d.iter().all(|v| *v == d[0]);
    let var = if flat {
        0.0
    } else {
        d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    };
    [
        mean,
        var.sqrt(),
        texture(image),
        spectral_sharpness(image),
        n_points as f64,
    ]
}

/// Mean forward-difference gradient magnitude (zero past the last row/column).
pub fn texture(image: &Frame) -> f64 {
    let (h, w) = image.shape();
    let mut total = 0.0;
    for r in 0..h {
        for c in 0..w {
            let v = image.get(r, c);
            let gx = if c + 1 < w {
                image.get(r, c + 1) - v
            } else {
                0.0
            };
            let gy = if r + 1 < h {
                image.get(r + 1, c) - v
            } else {
                0.0
            };
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / (h * w) as f64
}

/// Share of non-DC spectral power at radial frequency above [`SHARP_CUTOFF`].
pub fn spectral_sharpness(image: &Frame) -> f64 {
    let (h, w) = image.shape();
    let mut buf: Vec<Complex<f64>> = image.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let (mut high, mut total) = (0.0, 0.0);
    for r in 0..h {
        let fy = r.min(h - r) as f64 / h as f64;
        for c in 0..w {
            if r == 0 && c == 0 {
                continue;
            }
            let fx = c.min(w - c) as f64 / w as f64;
            let p = buf[r * w + c].norm_sqr();
            total += p;
            if (fy * fy + fx * fx).sqrt() > SHARP_CUTOFF {
                high += p;
            }
        }
    }
    // relative guard: a constant image leaves only rounding noise
    if total <= 1e-20 * buf[0].norm_sqr().max(1.0) {
        0.0
    } else {
        high / total
    }
}

/// Per-feature z-score statistics; zero spread maps to a unit divisor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: PriorVector,
    pub std: PriorVector,
}

impl Normalizer {
    pub fn fit(rows: &[PriorVector]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Config(
                "cannot normalise an empty feature set".into(),
            ));
        }
        let n = rows.len() as f64;
        let mut mean = [0.0; NUM_PRIORS];
        let mut std = [0.0; NUM_PRIORS];
        for j in 0..NUM_PRIORS {
            mean[j] = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let s = (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            std[j] = if s > 0.0 { s } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, row: &PriorVector) -> PriorVector {
        std::array::from_fn(|j| (row[j] - self.mean[j]) / self.std[j])
    }
}

fn dist2(a: &PriorVector, b: &PriorVector) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Index of the nearest center; ties go to the lower index.
pub fn nearest(centers: &[PriorVector], x: &PriorVector) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = dist2(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Seeded k-means with k-means++ seeding. Returns centers and assignments.
pub fn kmeans(
    points: &[PriorVector],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Vec<PriorVector>, Vec<usize>)> {
    if k == 0 {
        return Err(Error::Config(
            "number of clusters must be at least 1".into(),
        ));
    }
    if points.len() < k {
        return Err(Error::Config(format!(
            "{} samples cannot form {k} clusters",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.gen_range(0..points.len())
        };
        centers.push(points[pick]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &points[pick]));
        }
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(&centers, p)).collect();
    for _ in 0..max_iter {
        let mut sums = vec![[0.0; NUM_PRIORS]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for j in 0..NUM_PRIORS {
                sums[a][j] += p[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = std::array::from_fn(|j| sums[c][j] / counts[c] as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(&centers, p)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok((centers, assign))
}

/// Cluster centers (in normalised feature space), learnable logits and the
/// static id → cluster table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub normalizer: Normalizer,
    pub centers: Vec<PriorVector>,
    pub alpha: Vec<f64>,
    pub assignments: BTreeMap<String, usize>,
}

impl ClusterModel {
    /// Fit on `train` features; `extra` samples (validation) are assigned to
    /// the nearest fitted center.
    pub fn fit(
        train: &[(String, PriorVector)],
        extra: &[(String, PriorVector)],
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let raw: Vec<PriorVector> = train.iter().map(|(_, f)| *f).collect();
        if raw.len() < k {
            return Err(Error::Config(format!(
                "{} training samples cannot form {k} clusters",
                raw.len()
            )));
        }
        let normalizer = Normalizer::fit(&raw)?;
        let z: Vec<PriorVector> = raw.iter().map(|r| normalizer.apply(r)).collect();
        let (centers, assign) = kmeans(&z, k, seed, KMEANS_ITERS)?;
        let mut assignments: BTreeMap<String, usize> =
            train.iter().map(|(id, _)| id.clone()).zip(assign).collect();
        for (id, f) in extra {
            assignments.insert(id.clone(), nearest(&centers, &normalizer.apply(f)));
        }
        Ok(Self {
            normalizer,
            centers,
            alpha: vec![0.0; k],
            assignments,
        })
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn cluster_of(&self, id: &str) -> Result<usize> {
        self.assignments
            .get(id)
            .copied()
            .ok_or_else(|| Error::State(format!("sample '{id}' has no cluster")))
    }

    pub fn clusters_of(&self, ids: &[&str]) -> Result<Vec<usize>> {
        ids.iter().map(|id| self.cluster_of(id)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `w_i = exp(α_c(i)) / mean_k exp(α_c(k))` over the batch.
pub fn sample_weights(alpha: &[f64], clusters: &[usize]) -> Result<Vec<f64>> {
    if clusters.is_empty() {
        return Err(Error::State("sample weights of an empty batch".into()));
    }
    if let Some(&c) = clusters.iter().find(|&&c| c >= alpha.len()) {
        return Err(Error::State(format!(
            "cluster {c} has no logit ({} clusters)",
            alpha.len()
        )));
    }
    let m = clusters
        .iter()
        .map(|&c| alpha[c])
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = clusters.iter().map(|&c| (alpha[c] - m).exp()).collect();
    let s: f64 = e.iter().sum();
    let b = clusters.len() as f64;
    Ok(e.into_iter().map(|v| b * v / s).collect())
}

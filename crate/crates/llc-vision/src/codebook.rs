//! Visual codebook: descriptor sampling and k-means clustering.
//!
//! The codebook is a flat row-major `M x dim` matrix of f32 bases shared by
//! every descriptor scale. Training samples a target number of non-zero
//! descriptors from the corpus (shuffled with a seeded RNG so the pool is
//! reproducible), then runs k-means++ initialization followed by Lloyd
//! iterations. All distance work is accumulated in f64 to keep assignment
//! ties and distortion values platform-independent.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{extract_dense, Descriptor, DescriptorConfig};
use crate::error::{Error, Result};
use crate::image::{preprocess, load_gray, PreprocessConfig};

/// `M x dim` matrix of cluster centers, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    dim: usize,
    data: Vec<f32>,
}

impl Codebook {
    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook data of {} floats does not form rows of dim {dim}",
                data.len()
            )));
        }
        Ok(Codebook { dim, data })
    }

    /// Number of bases, `M`.
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn basis(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Squared Euclidean distance from `query` to basis `i`, accumulated in f64.
    #[inline]
    pub fn dist_sq(&self, i: usize, query: &[f32]) -> f64 {
        debug_assert_eq!(query.len(), self.dim);
        dist_sq(self.basis(i), query)
    }
}

#[inline]
pub(crate) fn dist_sq(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    acc
}

// ---------------------------------------------------------------------------
// Codebook serialization: magic, version, M, dim (u32 LE), then M*dim f32 LE.
// ---------------------------------------------------------------------------

const CODEBOOK_MAGIC: &[u8; 4] = b"LVCB";
const CODEBOOK_VERSION: u32 = 1;

pub fn write_codebook(w: &mut impl Write, cb: &Codebook) -> std::io::Result<()> {
    w.write_all(CODEBOOK_MAGIC)?;
    w.write_all(&CODEBOOK_VERSION.to_le_bytes())?;
    w.write_all(&(cb.len() as u32).to_le_bytes())?;
    w.write_all(&(cb.dim as u32).to_le_bytes())?;
    for &v in &cb.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_codebook(r: &mut impl Read) -> Result<Codebook> {
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::BadCodebook(e.to_string()))?;
    if data.len() < 16 {
        return Err(Error::BadCodebook("shorter than the 16-byte header".into()));
    }
    if &data[..4] != CODEBOOK_MAGIC {
        return Err(Error::BadCodebook(format!("bad magic {:?}", &data[..4])));
    }
    let u32_at = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CODEBOOK_VERSION {
        return Err(Error::BadCodebook(format!("unsupported version {version}")));
    }
    let m = u32_at(8) as usize;
    let dim = u32_at(12) as usize;
    let need = 16 + m * dim * 4;
    if m == 0 || dim == 0 || data.len() != need {
        return Err(Error::BadCodebook(format!(
            "header says {m}x{dim} but file holds {} bytes, expected {need}",
            data.len()
        )));
    }
    let floats = data[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Codebook::from_flat(dim, floats)
}

pub fn save_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + cb.data.len() * 4);
    write_codebook(&mut buf, cb).expect("write to vec");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_codebook(&mut data.as_slice())
}

// ---------------------------------------------------------------------------
// Descriptor pool sampling
// ---------------------------------------------------------------------------

/// Result of [`sample_pool`]: the sampled descriptors and whether the corpus
/// actually had `target` non-zero descriptors to give.
#[derive(Debug)]
pub struct PoolSample {
    pub descriptors: Vec<Descriptor>,
    pub complete: bool,
}

/// Sample up to `target` non-zero descriptors from the corpus images.
///
/// Image order is shuffled with the seeded RNG, images are read and described
/// until enough descriptors are collected, and the collected pool is shuffled
/// once more so no single image dominates a truncated pool. Flat-patch (zero)
/// descriptors are skipped. If the whole corpus yields fewer than `target`,
/// the short pool is returned with `complete = false` and a warning; a corpus
/// with no usable descriptors at all is an error.
pub fn sample_pool(
    images: &[PathBuf],
    dcfg: &DescriptorConfig,
    pre: Option<&PreprocessConfig>,
    target: usize,
    seed: u64,
) -> Result<PoolSample> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("sample_pool needs at least one image".into()));
    }
    if target == 0 {
        return Err(Error::InvalidArgument("sample_pool target must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<&PathBuf> = images.iter().collect();
    order.shuffle(&mut rng);

    let mut pool = Vec::with_capacity(target.min(1 << 20));
    for path in order {
        if pool.len() >= target {
            break;
        }
        let mut img = load_gray(path)?;
        if let Some(cfg) = pre {
            img = preprocess(&img, cfg)?;
        }
        pool.extend(extract_dense(&img, dcfg)?.into_iter().filter(|d| !d.is_zero()));
    }
    if pool.is_empty() {
        return Err(Error::EmptyDescriptorPool);
    }
    pool.shuffle(&mut rng);
    let complete = pool.len() >= target;
    pool.truncate(target);
    if !complete {
        log::warn!(
            "descriptor pool short: wanted {target}, corpus yielded {}",
            pool.len()
        );
    }
    Ok(PoolSample { descriptors: pool, complete })
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    /// Number of centers, `M`.
    pub m: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { m: 256, max_iters: 100, tol: 1e-4, seed: 0 }
    }
}

/// Cluster a descriptor pool into a codebook. Thin wrapper over
/// [`kmeans_points`] on the flattened descriptor values.
pub fn kmeans(pool: &[Descriptor], cfg: &KMeansConfig) -> Result<Codebook> {
    let dim = crate::descriptor::DESCRIPTOR_DIM;
    let mut flat = Vec::with_capacity(pool.len() * dim);
    for d in pool {
        debug_assert_eq!(d.values.len(), dim);
        flat.extend_from_slice(&d.values);
    }
    Ok(kmeans_points(&flat, dim, cfg)?.codebook)
}

/// k-means result: final centers plus the distortion recorded at each
/// assignment pass (mean squared distance to the assigned center).
#[derive(Debug)]
pub struct KMeansRun {
    pub codebook: Codebook,
    pub distortion_history: Vec<f64>,
}

/// Seeded k-means++ initialization followed by Lloyd iterations on generic
/// flat `n x dim` data.
///
/// Iteration stops after `max_iters` assignment passes or when the relative
/// distortion improvement falls below `tol`. Clusters that lose all points
/// are re-seeded deterministically from the point currently farthest from its
/// assigned center.
pub fn kmeans_points(points: &[f32], dim: usize, cfg: &KMeansConfig) -> Result<KMeansRun> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "point data of {} floats does not form rows of dim {dim}",
            points.len()
        )));
    }
    let n = points.len() / dim;
    if cfg.m == 0 {
        return Err(Error::InvalidArgument("k-means needs m >= 1".into()));
    }
    if n < cfg.m {
        return Err(Error::PoolTooSmall { m: cfg.m, got: n });
    }
    let point = |i: usize| &points[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = init_plus_plus(points, dim, cfg.m, &mut rng);

    let mut assignment = vec![0usize; n];
    let mut history: Vec<f64> = Vec::new();
    for _iter in 0..cfg.max_iters {
        // Assignment pass; ties go to the lowest center index.
        let mut distortion = 0.0f64;
        for i in 0..n {
            let p = point(i);
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..cfg.m {
                let d = dist_sq(&centers[c * dim..(c + 1) * dim], p);
                if d < best.0 {
                    best = (d, c);
                }
            }
            assignment[i] = best.1;
            distortion += best.0;
        }
        distortion /= n as f64;
        let converged = match history.last() {
            Some(&prev) => {
                if prev <= 0.0 {
                    distortion <= 0.0
                } else {
                    (prev - distortion).abs() / prev < cfg.tol
                }
            }
            None => false,
        };
        history.push(distortion);
        if converged {
            break;
        }

        // Re-seed empty clusters from the farthest-out point before the
        // update so every mean below averages at least one point.
        let mut counts = vec![0usize; cfg.m];
        for &a in &assignment {
            counts[a] += 1;
        }
        for empty in 0..cfg.m {
            if counts[empty] > 0 {
                continue;
            }
            let mut far = (f64::NEG_INFINITY, usize::MAX);
            for i in 0..n {
                if counts[assignment[i]] <= 1 {
                    continue; // stealing would just move the hole
                }
                let d = dist_sq(&centers[assignment[i] * dim..(assignment[i] + 1) * dim], point(i));
                if d > far.0 {
                    far = (d, i);
                }
            }
            if far.1 == usize::MAX {
                return Err(Error::Internal("k-means could not re-seed an empty cluster".into()));
            }
            counts[assignment[far.1]] -= 1;
            assignment[far.1] = empty;
            counts[empty] = 1;
        }

        // Update pass.
        let mut sums = vec![0.0f64; cfg.m * dim];
        for i in 0..n {
            let row = &mut sums[assignment[i] * dim..(assignment[i] + 1) * dim];
            for (acc, &v) in row.iter_mut().zip(point(i)) {
                *acc += v as f64;
            }
        }
        for c in 0..cfg.m {
            let inv = 1.0 / counts[c] as f64;
            for d in 0..dim {
                centers[c * dim + d] = (sums[c * dim + d] * inv) as f32;
            }
        }
    }

    Ok(KMeansRun {
        codebook: Codebook::from_flat(dim, centers)?,
        distortion_history: history,
    })
}

/// k-means++ seeding: first center uniform, subsequent centers sampled with
/// probability proportional to squared distance from the nearest chosen
/// center. Zero-weight points (exact duplicates of a chosen center) can never
/// be drawn, so a pool of `m` distinct points yields all of them.
fn init_plus_plus(points: &[f32], dim: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len() / dim;
    let point = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut centers = Vec::with_capacity(m * dim);

    let first = rng.random_range(0..n);
    centers.extend_from_slice(point(first));

    let mut min_d: Vec<f64> = (0..n).map(|i| dist_sq(point(first), point(i))).collect();
    while centers.len() < m * dim {
        let total: f64 = min_d.iter().sum();
        let chosen = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in min_d.iter().enumerate() {
                acc += w;
                if acc > r {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Everything coincides with a center already; any point works.
            rng.random_range(0..n)
        };
        let c = point(chosen).to_vec();
        for i in 0..n {
            min_d[i] = min_d[i].min(dist_sq(&c, point(i)));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

// ---------------------------------------------------------------------------

//! Locality-constrained linear coding (LLC) and spatial-pyramid max pooling.
//!
//! Each descriptor `x` is reconstructed from its K nearest codebook bases
//! with a locality penalty: minimize
//!
//! ```text
//! J(a) = 1/2 * ||x - B a||^2  +  sum_j (a_j * w_j)^2
//! ```
//!
//! over the K selected bases `B`, where the locality weight `w_j` grows
//! exponentially with the distance from `x` to basis `j`. Far-away bases get
//! large weights and therefore near-zero coefficients, so the code stays
//! local even before the K-neighbour restriction. The minimizer is the
//! solution of the SPD system `(B^T B + 2 diag(w^2)) a = B^T x`, solved here
//! by Cholesky factorization in f64.
//!
//! Neighbour selection goes through the kd-tree, so the `max_comparisons`
//! budget directly trades encoding time against code quality.
//!
//! Image-level features max-pool absolute coefficients over a spatial
//! pyramid (by default 1x1 + 2x2 + 3x3 grids), concatenated level by level
//! and L2-normalized.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::descriptor::Descriptor;
use crate::error::{Error, Result};
use crate::kdtree::{knn, KdTree};

/// How the locality weight is computed from the basis distance `d`.
///
/// The reconstruction penalty in the source formulation is typeset ambiguously
/// between these two readings; they coincide at `sigma = 1` and differ only
/// by a bias-versus-scale effect elsewhere. `SigmaInsideExp` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `w = exp(d / sigma)`: sigma sets how fast locality decays.
    SigmaInsideExp,
    /// `w = exp(d) / sigma`: sigma uniformly rescales all weights.
    SigmaOutsideExp,
}

impl WeightMode {
    #[inline]
    pub fn weight(self, distance: f64, sigma: f64) -> f64 {
        match self {
            WeightMode::SigmaInsideExp => (distance / sigma).exp(),
            WeightMode::SigmaOutsideExp => distance.exp() / sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlcConfig {
    /// Number of nearest bases used per descriptor.
    pub k: usize,
    pub sigma: f64,
    /// kd-tree comparison budget; `None` searches exactly. The field-level
    /// default means a config file with an `[llc]` section but no
    /// `max_comparisons` key gets unbounded search, while a file without the
    /// section keeps the bounded default below.
    #[serde(default)]
    pub max_comparisons: Option<usize>,
    pub weight_mode: WeightMode,
}

impl Default for LlcConfig {
    fn default() -> Self {
        LlcConfig { k: 5, sigma: 1.0, max_comparisons: Some(100), weight_mode: WeightMode::SigmaInsideExp }
    }
}

/// Sparse code: coefficient per selected basis, sorted by basis index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCode {
    indices: Vec<u32>,
    coeffs: Vec<f64>,
}

impl SparseCode {
    pub fn new(mut pairs: Vec<(u32, f64)>) -> Self {
        pairs.sort_by_key(|&(i, _)| i);
        SparseCode {
            indices: pairs.iter().map(|&(i, _)| i).collect(),
            coeffs: pairs.iter().map(|&(_, c)| c).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices.iter().copied().zip(self.coeffs.iter().copied())
    }
}

/// Encode one descriptor against the codebook.
///
/// The zero descriptor (flat patch) keeps its K nearest bases but gets an
/// all-zero coefficient vector: flat patches carry no evidence and must not
/// excite any pooled cell. If the comparison budget is smaller than K the
/// code simply uses the neighbours the search managed to find.
pub fn llc_encode(x: &[f32], cb: &Codebook, tree: &KdTree, cfg: &LlcConfig) -> Result<SparseCode> {
    if x.len() != cb.dim() {
        return Err(Error::DimensionMismatch { expected: cb.dim(), got: x.len() });
    }
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("LLC needs k >= 1".into()));
    }
    if !(cfg.sigma.is_finite() && cfg.sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("LLC sigma must be positive, got {}", cfg.sigma)));
    }
    if cfg.k > cb.len() {
        return Err(Error::KExceedsCodebook { k: cfg.k, m: cb.len() });
    }

    let neighbors = knn(cb, tree, x, cfg.k, cfg.max_comparisons)?;
    if x.iter().all(|&v| v == 0.0) {
        return Ok(SparseCode::new(neighbors.iter().map(|n| (n.index as u32, 0.0)).collect()));
    }
    let n = neighbors.len();
    if n == 0 {
        return Ok(SparseCode::default());
    }

    let dim = cb.dim();
    // B is dim x n with the selected bases as columns, in f64.
    let b = DMatrix::from_fn(dim, n, |r, c| cb.basis(neighbors[c].index)[r] as f64);
    let xv = DVector::from_fn(dim, |r, _| x[r] as f64);
    let mut a = b.transpose() * &b;
    for (j, nb) in neighbors.iter().enumerate() {
        let w = cfg.weight_mode.weight(nb.distance, cfg.sigma);
        a[(j, j)] += 2.0 * w * w;
    }
    let rhs = b.transpose() * xv;
    let alpha = Cholesky::new(a)
        .ok_or_else(|| Error::Internal("LLC system is not positive definite".into()))?
        .solve(&rhs);

    Ok(SparseCode::new(
        neighbors.iter().zip(alpha.iter()).map(|(nb, &c)| (nb.index as u32, c)).collect(),
    ))
}

/// A descriptor's sparse code together with its image location and scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDescriptor {
    pub x: u32,
    pub y: u32,
    pub scale: u32,
    pub code: SparseCode,
}

/// Encode every descriptor of an image, preserving order.
pub fn encode_image(
    descriptors: &[Descriptor],
    cb: &Codebook,
    tree: &KdTree,
    cfg: &LlcConfig,
) -> Result<Vec<EncodedDescriptor>> {
    descriptors
        .iter()
        .map(|d| {
            Ok(EncodedDescriptor {
                x: d.x,
                y: d.y,
                scale: d.scale,
                code: llc_encode(&d.values, cb, tree, cfg)?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Spatial-pyramid max pooling
// ---------------------------------------------------------------------------

/// Pyramid layout: grid subdivisions per level (`[1, 2, 3]` means 1x1, 2x2
/// and 3x3 cells) and whether the concatenated feature is L2-normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub grids: Vec<u32>,
    pub normalize: bool,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig { grids: vec![1, 2, 3], normalize: true }
    }
}

impl PyramidConfig {
    /// Total cell count over all levels.
    pub fn total_cells(&self) -> usize {
        self.grids.iter().map(|&g| (g * g) as usize).sum()
    }

    /// Length of the pooled feature for an M-basis codebook.
    pub fn feature_len(&self, m: usize) -> usize {
        m * self.total_cells()
    }
}

/// Image-level feature vector: per-cell, per-basis pooled coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub values: Vec<f32>,
}

/// Max-pool absolute coefficients over the pyramid.
///
/// Cells at a level `g` partition the image with half-open integer
/// boundaries `floor(c * extent / g)`, mirroring the CLAHE tiling. The
/// output is ordered level-major, then cell row-major, then basis index, and
/// is L2-normalized when the config says so. An all-zero pool (no codes or
/// only zero codes) is returned unnormalized.
pub fn spm_pool(
    codes: &[EncodedDescriptor],
    width: u32,
    height: u32,
    m: usize,
    cfg: &PyramidConfig,
) -> Result<PooledFeature> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidArgument("pooling needs a positive image extent".into()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("pooling needs a positive codebook size".into()));
    }
    if cfg.grids.is_empty() || cfg.grids.contains(&0) {
        return Err(Error::InvalidArgument("pyramid grids must be non-empty and positive".into()));
    }
    for c in codes {
        if c.x >= width || c.y >= height {
            return Err(Error::LocationOutOfBounds { x: c.x, y: c.y, width, height });
        }
        if let Some(&i) = c.code.indices().iter().find(|&&i| i as usize >= m) {
            return Err(Error::InvalidArgument(format!(
                "code references basis {i} but the codebook holds {m}"
            )));
        }
    }

    let mut out = vec![0.0f64; cfg.feature_len(m)];
    let mut level_offset = 0usize; // in cells
    for &g in &cfg.grids {
        let g = g as usize;
        let xb: Vec<u32> = (0..=g).map(|c| (c as u64 * width as u64 / g as u64) as u32).collect();
        let yb: Vec<u32> = (0..=g).map(|c| (c as u64 * height as u64 / g as u64) as u32).collect();
        let cell_of = |v: u32, bounds: &[u32]| -> usize {
            // Scan is fine: g is tiny. Last cell absorbs the upper edge.
            (0..bounds.len() - 1).find(|&c| v >= bounds[c] && v < bounds[c + 1]).unwrap_or(g - 1)
        };
        for code in codes {
            let cx = cell_of(code.x, &xb);
            let cy = cell_of(code.y, &yb);
            let base = (level_offset + cy * g + cx) * m;
            for (idx, coeff) in code.code.iter() {
                let slot = &mut out[base + idx as usize];
                let mag = coeff.abs();
                if mag > *slot {
                    *slot = mag;
                }
            }
        }
        level_offset += g * g;
    }

    if cfg.normalize {
        let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in out.iter_mut() {
                *v /= norm;
            }
        }
    }
    Ok(PooledFeature { values: out.iter().map(|&v| v as f32).collect() })
}

// ---------------------------------------------------------------------------
// PooledFeature serialization: binary record and a sparse text line
// compatible with SVMlight/LIBSVM-style tools.
// ---------------------------------------------------------------------------

const FEATURE_MAGIC: &[u8; 4] = b"LVPF";
const FEATURE_VERSION: u32 = 1;

pub fn write_feature(w: &mut impl Write, f: &PooledFeature) -> std::io::Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(f.values.len() as u32).to_le_bytes())?;
    for &v in &f.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_feature(r: &mut impl Read) -> Result<PooledFeature> {
    let mut data = Vec::new();
    r.read_to_end(&mut data).map_err(|e| Error::BadFeatureData(e.to_string()))?;
    if data.len() < 12 || &data[..4] != FEATURE_MAGIC {
        return Err(Error::BadFeatureData("missing LVPF header".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::BadFeatureData(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(data[8..12].try_into().unwrap()) as usize;
    if data.len() != 12 + len * 4 {
        return Err(Error::BadFeatureData(format!(
            "header says {len} floats but file holds {} bytes",
            data.len()
        )));
    }
    let values = data[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(PooledFeature { values })
}

pub fn save_feature(path: &Path, f: &PooledFeature) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + f.values.len() * 4);
    write_feature(&mut buf, f).expect("write to vec");
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_feature(path: &Path) -> Result<PooledFeature> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_feature(&mut data.as_slice())
}

/// Render `label index:value ...` with 1-based indices and only the non-zero
/// components, the common sparse text format of linear-classifier tools.
pub fn to_sparse_text(label: i64, f: &PooledFeature) -> String {
    let mut line = label.to_string();
    for (i, &v) in f.values.iter().enumerate() {
        if v != 0.0 {
            line.push_str(&format!(" {}:{}", i + 1, v));
        }
    }
    line
}

/// Parse a sparse text line back into a dense feature of length `len`.
pub fn from_sparse_text(line: &str, len: usize) -> Result<(i64, PooledFeature)> {
    let bad = |detail: String| Error::BadFeatureData(detail);
    let mut parts = line.split_whitespace();
    let label: i64 = parts
        .next()
        .ok_or_else(|| bad("empty line".into()))?
        .parse()
        .map_err(|e| bad(format!("bad label: {e}")))?;
    let mut values = vec![0.0f32; len];
    for pair in parts {
        let (idx, val) = pair.split_once(':').ok_or_else(|| bad(format!("missing ':' in {pair:?}")))?;
        let idx: usize = idx.parse().map_err(|e| bad(format!("bad index in {pair:?}: {e}")))?;
        if idx == 0 || idx > len {
            return Err(bad(format!("index {idx} out of range 1..={len}")));
        }
        values[idx - 1] = val.parse().map_err(|e| bad(format!("bad value in {pair:?}: {e}")))?;
    }
    Ok((label, PooledFeature { values }))
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kdtree::build_kdtree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0f64..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        v.iter().map(|&x| (x / norm) as f32).collect()
    }

    fn random_unit_codebook(m: usize, dim: usize, seed: u64) -> Codebook {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(m * dim);
        for _ in 0..m {
            data.extend(random_unit(dim, &mut rng));
        }
        Codebook::from_flat(dim, data).unwrap()
    }

    // -- test-side objective / gradient / iterative oracle -------------------

    fn objective(x: &[f32], bases: &[Vec<f64>], w: &[f64], alpha: &[f64]) -> f64 {
        let dim = x.len();
        let mut recon = 0.0;
        for d in 0..dim {
            let mut r = x[d] as f64;
            for (j, b) in bases.iter().enumerate() {
                r -= alpha[j] * b[d];
            }
            recon += r * r;
        }
        let penalty: f64 = alpha.iter().zip(w).map(|(&a, &wj)| (a * wj).powi(2)).sum();
        0.5 * recon + penalty
    }

    fn gradient(x: &[f32], bases: &[Vec<f64>], w: &[f64], alpha: &[f64]) -> Vec<f64> {
        let dim = x.len();
        let mut resid = vec![0.0f64; dim]; // B a - x
        for d in 0..dim {
            let mut r = -(x[d] as f64);
            for (j, b) in bases.iter().enumerate() {
                r += alpha[j] * b[d];
            }
            resid[d] = r;
        }
        bases
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let dot: f64 = b.iter().zip(&resid).map(|(bv, rv)| bv * rv).sum();
                dot + 2.0 * w[j] * w[j] * alpha[j]
            })
            .collect()
    }

    /// Independent solver: brute-force neighbour selection plus plain
    /// gradient descent with a Lipschitz step size, run to a tiny gradient.
    fn llc_oracle(x: &[f32], cb: &Codebook, k: usize, sigma: f64) -> (Vec<usize>, Vec<f64>) {
        let mut all: Vec<(f64, usize)> = (0..cb.len())
            .map(|i| {
                let mut acc = 0.0f64;
                for (a, b) in cb.basis(i).iter().zip(x) {
                    let d = *a as f64 - *b as f64;
                    acc += d * d;
                }
                (acc, i)
            })
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let picked: Vec<usize> = all[..k].iter().map(|&(_, i)| i).collect();
        let w: Vec<f64> = all[..k].iter().map(|&(d, _)| (d.sqrt() / sigma).exp()).collect();
        let bases: Vec<Vec<f64>> = picked.iter().map(|&i| cb.basis(i).iter().map(|&v| v as f64).collect()).collect();

        // Lipschitz bound: Frobenius norm of B^T B plus the diagonal term.
        let mut frob = 0.0f64;
        for bi in &bases {
            for bj in &bases {
                let dot: f64 = bi.iter().zip(bj).map(|(a, b)| a * b).sum();
                frob += dot * dot;
            }
        }
        let lip = frob.sqrt() + 2.0 * w.iter().map(|&wj| wj * wj).fold(0.0, f64::max);
        let step = 1.0 / lip;

        let mut alpha = vec![0.0f64; k];
        for _ in 0..500_000 {
            let g = gradient(x, &bases, &w, &alpha);
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gnorm < 1e-12 {
                break;
            }
            for (a, gv) in alpha.iter_mut().zip(&g) {
                *a -= step * gv;
            }
        }
        (picked, alpha)
    }

    // ------------------------------------------------------------------------

    #[test]
    fn one_dimensional_fixture_has_closed_form() {
        // Single basis b = [1], x = [1], d = 0 so w = 1:
        // minimize 1/2 (1 - a)^2 + a^2  =>  a = 1/3.
        let cb = Codebook::from_flat(1, vec![1.0]).unwrap();
        let tree = build_kdtree(&cb, 16).unwrap();
        let cfg = LlcConfig { k: 1, sigma: 1.0, max_comparisons: None, weight_mode: WeightMode::SigmaInsideExp };
        let code = llc_encode(&[1.0], &cb, &tree, &cfg).unwrap();
        assert_eq!(code.indices(), &[0]);
        assert!((code.coeffs()[0] - 1.0 / 3.0).abs() < 1e-12, "{}", code.coeffs()[0]);
    }

    #[test]
    fn zero_descriptor_gets_zero_coefficients() {
        let cb = random_unit_codebook(32, 8, 1);
        let tree = build_kdtree(&cb, 16).unwrap();
        let cfg = LlcConfig { k: 5, max_comparisons: None, ..Default::default() };
        let code = llc_encode(&[0.0; 8], &cb, &tree, &cfg).unwrap();
        assert_eq!(code.len(), 5);
        assert!(code.coeffs().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn weight_modes_agree_at_sigma_one_and_differ_otherwise() {
        let cb = random_unit_codebook(64, 16, 2);
        let tree = build_kdtree(&cb, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_unit(16, &mut rng);
        let base = LlcConfig { k: 5, sigma: 1.0, max_comparisons: None, weight_mode: WeightMode::SigmaInsideExp };

        let inside = llc_encode(&x, &cb, &tree, &base).unwrap();
        let outside = llc_encode(&x, &cb, &tree, &LlcConfig { weight_mode: WeightMode::SigmaOutsideExp, ..base.clone() }).unwrap();
        assert_eq!(inside, outside, "modes coincide at sigma = 1");

        let inside2 = llc_encode(&x, &cb, &tree, &LlcConfig { sigma: 2.0, ..base.clone() }).unwrap();
        let outside2 =
            llc_encode(&x, &cb, &tree, &LlcConfig { sigma: 2.0, weight_mode: WeightMode::SigmaOutsideExp, ..base }).unwrap();
        assert_eq!(inside2.indices(), outside2.indices());
        let diff: f64 = inside2.coeffs().iter().zip(outside2.coeffs()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-9, "modes should differ at sigma = 2, diff {diff}");
    }

    #[test]
    fn solve_matches_iterative_oracle() {
        let cb = random_unit_codebook(64, 16, 4);
        let tree = build_kdtree(&cb, 16).unwrap();
        let cfg = LlcConfig { k: 5, sigma: 1.0, max_comparisons: None, weight_mode: WeightMode::SigmaInsideExp };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..50 {
            let x = random_unit(16, &mut rng);
            let code = llc_encode(&x, &cb, &tree, &cfg).unwrap();
            let (picked, alpha) = llc_oracle(&x, &cb, 5, 1.0);
            let mut expect: Vec<(u32, f64)> = picked.iter().map(|&i| i as u32).zip(alpha).collect();
            expect.sort_by_key(|&(i, _)| i);
            assert_eq!(code.indices(), expect.iter().map(|&(i, _)| i).collect::<Vec<_>>(), "case {case}");
            for ((_, want), got) in expect.iter().zip(code.coeffs()) {
                assert!((want - got).abs() <= 1e-6, "case {case}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn gradient_at_solution_vanishes() {
        let cb = random_unit_codebook(48, 12, 6);
        let tree = build_kdtree(&cb, 16).unwrap();
        let cfg = LlcConfig { k: 4, sigma: 1.0, max_comparisons: None, weight_mode: WeightMode::SigmaInsideExp };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let x = random_unit(12, &mut rng);
            let code = llc_encode(&x, &cb, &tree, &cfg).unwrap();
            let bases: Vec<Vec<f64>> =
                code.indices().iter().map(|&i| cb.basis(i as usize).iter().map(|&v| v as f64).collect()).collect();
            let w: Vec<f64> = code
                .indices()
                .iter()
                .map(|&i| (cb.dist_sq(i as usize, &x).sqrt() / cfg.sigma).exp())
                .collect();
            let g = gradient(&x, &bases, &w, code.coeffs());
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(gnorm <= 1e-8, "gradient norm {gnorm}");
        }
    }

    #[test]
    fn encoding_never_beats_the_zero_code_objective() {
        // J(alpha) <= J(0) = 1/2 ||x||^2 must hold at the minimizer.
        let cb = random_unit_codebook(64, 16, 8);
        let tree = build_kdtree(&cb, 16).unwrap();
        let cfg = LlcConfig { k: 5, sigma: 1.0, max_comparisons: None, weight_mode: WeightMode::SigmaInsideExp };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = random_unit(16, &mut rng);
            let code = llc_encode(&x, &cb, &tree, &cfg).unwrap();
            let bases: Vec<Vec<f64>> =
                code.indices().iter().map(|&i| cb.basis(i as usize).iter().map(|&v| v as f64).collect()).collect();
            let w: Vec<f64> = code
                .indices()
                .iter()
                .map(|&i| (cb.dist_sq(i as usize, &x).sqrt() / cfg.sigma).exp())
                .collect();
            let j = objective(&x, &bases, &w, code.coeffs());
            let j0 = 0.5 * x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            assert!(j <= j0 + 1e-12, "J {j} > J(0) {j0}");
        }
    }

    /// Validates the test-side calculus itself: central finite differences of
    /// `objective` must match `gradient` at random points.
    #[test]
    fn finite_differences_match_analytic_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let dim = 6;
            let k = 3;
            let x = random_unit(dim, &mut rng);
            let bases: Vec<Vec<f64>> =
                (0..k).map(|_| (0..dim).map(|_| rng.random_range(-1.0f64..1.0)).collect()).collect();
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.5f64..3.0)).collect();
            let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0f64..1.0)).collect();
            let g = gradient(&x, &bases, &w, &alpha);
            let eps = 1e-6;
            for j in 0..k {
                let mut hi = alpha.clone();
                let mut lo = alpha.clone();
                hi[j] += eps;
                lo[j] -= eps;
                let fd = (objective(&x, &bases, &w, &hi) - objective(&x, &bases, &w, &lo)) / (2.0 * eps);
                let denom = g[j].abs().max(1.0);
                assert!((fd - g[j]).abs() / denom < 1e-5, "component {j}: fd {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn encode_image_preserves_order_and_matches_single_calls() {
        let cb = random_unit_codebook(32, 128, 11);
        let tree = build_kdtree(&cb, 16).unwrap();
        let cfg = LlcConfig { k: 3, max_comparisons: None, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let descs: Vec<Descriptor> = (0..10)
            .map(|i| Descriptor { x: i * 5, y: i * 3, scale: 4, values: random_unit(128, &mut rng) })
            .collect();
        let batch = encode_image(&descs, &cb, &tree, &cfg).unwrap();
        assert_eq!(batch.len(), descs.len());
        for (e, d) in batch.iter().zip(&descs) {
            assert_eq!((e.x, e.y, e.scale), (d.x, d.y, d.scale));
            assert_eq!(e.code, llc_encode(&d.values, &cb, &tree, &cfg).unwrap());
        }
        assert!(encode_image(&[], &cb, &tree, &cfg).unwrap().is_empty());
    }

    #[test]
    fn unbudgeted_codes_ignore_leaf_capacity() {
        let cb = random_unit_codebook(128, 32, 13);
        let cfg = LlcConfig { k: 5, max_comparisons: None, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let trees: Vec<_> = [1, 8, 64].iter().map(|&c| build_kdtree(&cb, c).unwrap()).collect();
        for _ in 0..20 {
            let x = random_unit(32, &mut rng);
            let base = llc_encode(&x, &cb, &trees[0], &cfg).unwrap();
            for tree in &trees[1..] {
                assert_eq!(base, llc_encode(&x, &cb, tree, &cfg).unwrap());
            }
        }
    }

    // -- pooling -------------------------------------------------------------

    fn single_code(x: u32, y: u32, basis: u32, coeff: f64) -> EncodedDescriptor {
        EncodedDescriptor { x, y, scale: 4, code: SparseCode::new(vec![(basis, coeff)]) }
    }

    /// Hand-worked fixture: one code with coefficient 0.8 at basis 12 of 64,
    /// located at (10, 50) in a 64x64 image, grids [1, 2, 3].
    ///
    /// Level 1: single cell. Level 2 boundaries [0, 32, 64): x=10 -> col 0,
    /// y=50 -> row 1, cell 2. Level 3 boundaries [0, 21, 42, 64): x=10 ->
    /// col 0, y=50 -> row 2, cell 6. Level offsets are 0, 1, 5 cells.
    #[test]
    fn spm_single_code_lands_in_hand_computed_cells() {
        let codes = [single_code(10, 50, 12, 0.8)];
        let cfg = PyramidConfig { grids: vec![1, 2, 3], normalize: false };
        let f = spm_pool(&codes, 64, 64, 64, &cfg).unwrap();
        assert_eq!(f.values.len(), 64 * 14);
        let expected_slots = [(0usize, 0usize), (1, 2), (5, 6)];
        let mut nonzero = 0;
        for (i, &v) in f.values.iter().enumerate() {
            if v != 0.0 {
                nonzero += 1;
                let cell = i / 64;
                let basis = i % 64;
                assert_eq!(basis, 12);
                assert!(
                    expected_slots.iter().any(|&(off, c)| off + c == cell),
                    "unexpected cell {cell}"
                );
                assert!((v - 0.8).abs() < 1e-7);
            }
        }
        assert_eq!(nonzero, 3);

        // Same fixture normalized: three equal entries of 0.8 scale to 1/sqrt(3).
        let f2 = spm_pool(&codes, 64, 64, 64, &PyramidConfig { grids: vec![1, 2, 3], normalize: true }).unwrap();
        let expect = 1.0 / 3.0f32.sqrt();
        for &v in f2.values.iter().filter(|&&v| v != 0.0) {
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn feature_length_is_m_times_total_cells() {
        let cfg = PyramidConfig::default();
        assert_eq!(cfg.total_cells(), 14);
        assert_eq!(cfg.feature_len(1200), 16_800);
        assert_eq!(cfg.feature_len(3600), 50_400);
        let f = spm_pool(&[], 32, 32, 1200, &cfg).unwrap();
        assert_eq!(f.values.len(), 16_800);
        assert!(f.values.iter().all(|&v| v == 0.0));
    }

    /// Brute-force oracle: recompute the pool per cell by filtering codes
    /// into explicit rectangles.
    #[test]
    fn spm_matches_per_cell_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (w, h, m) = (50u32, 38u32, 16usize);
        let cfg = PyramidConfig { grids: vec![1, 2, 3], normalize: false };
        let codes: Vec<EncodedDescriptor> = (0..40)
            .map(|_| {
                let pairs: Vec<(u32, f64)> = (0..3)
                    .map(|_| (rng.random_range(0..m as u32), rng.random_range(-1.0f64..1.0)))
                    .collect();
                EncodedDescriptor {
                    x: rng.random_range(0..w),
                    y: rng.random_range(0..h),
                    scale: 4,
                    code: SparseCode::new(pairs),
                }
            })
            .collect();
        let f = spm_pool(&codes, w, h, m, &cfg).unwrap();

        let mut level_offset = 0usize;
        for &g in &cfg.grids {
            for cy in 0..g {
                for cx in 0..g {
                    let x0 = cx * w / g;
                    let x1 = (cx + 1) * w / g;
                    let y0 = cy * h / g;
                    let y1 = (cy + 1) * h / g;
                    for basis in 0..m {
                        let mut expect = 0.0f64;
                        for c in &codes {
                            if c.x >= x0 && c.x < x1 && c.y >= y0 && c.y < y1 {
                                for (i, coeff) in c.code.iter() {
                                    if i as usize == basis {
                                        expect = expect.max(coeff.abs());
                                    }
                                }
                            }
                        }
                        let slot = (level_offset + (cy * g + cx) as usize) * m + basis;
                        assert_eq!(f.values[slot], expect as f32);
                    }
                }
            }
            level_offset += (g * g) as usize;
        }
    }

    #[test]
    fn spm_is_permutation_invariant_normalized_and_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for case in 0..100 {
            let (w, h, m) = (rng.random_range(6..60u32), rng.random_range(6..60u32), rng.random_range(4..24usize));
            let cfg = PyramidConfig::default();
            let mut codes: Vec<EncodedDescriptor> = (0..rng.random_range(1..30))
                .map(|_| {
                    single_code(
                        rng.random_range(0..w),
                        rng.random_range(0..h),
                        rng.random_range(0..m as u32),
                        rng.random_range(-2.0f64..2.0),
                    )
                })
                .collect();
            let a = spm_pool(&codes, w, h, m, &cfg).unwrap();
            assert!(a.values.iter().all(|&v| v >= 0.0 && v.is_finite()));
            let norm: f64 = a.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            let zero = a.values.iter().all(|&v| v == 0.0);
            assert!(zero || (norm - 1.0).abs() < 1e-6, "case {case}: norm {norm}");

            // Shuffle the code order; pooling is order-free.
            for i in (1..codes.len()).rev() {
                let j = rng.random_range(0..=i);
                codes.swap(i, j);
            }
            let b = spm_pool(&codes, w, h, m, &cfg).unwrap();
            assert_eq!(a, b, "case {case}");
        }
    }

    /// Translation robustness at cell granularity: moving every code so that
    /// it stays inside its original cell at every pyramid level leaves the
    /// pooled feature untouched.
    #[test]
    fn spm_translation_within_cells_is_invariant() {
        let (w, h, m) = (60u32, 60u32, 8usize);
        let cfg = PyramidConfig::default();
        let cell_of = |v: u32, extent: u32, g: u32| (0..g).find(|&c| v >= c * extent / g && v < (c + 1) * extent / g).unwrap();
        let same_cells = |a: (u32, u32), b: (u32, u32)| {
            cfg.grids.iter().all(|&g| {
                cell_of(a.0, w, g) == cell_of(b.0, w, g) && cell_of(a.1, h, g) == cell_of(b.1, h, g)
            })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tested = 0;
        while tested < 100 {
            // Keep originals clear of the right/bottom edge so the shifted
            // copies stay inside the image.
            let codes: Vec<EncodedDescriptor> = (0..10)
                .map(|_| {
                    single_code(rng.random_range(0..w - 3), rng.random_range(0..h - 3), rng.random_range(0..m as u32), 1.0)
                })
                .collect();
            let (dx, dy) = (rng.random_range(0..4u32), rng.random_range(0..4u32));
            let moved: Vec<EncodedDescriptor> = codes
                .iter()
                .map(|c| EncodedDescriptor { x: c.x + dx, y: c.y + dy, scale: c.scale, code: c.code.clone() })
                .collect();
            if !codes.iter().zip(&moved).all(|(a, b)| same_cells((a.x, a.y), (b.x, b.y))) {
                continue; // translation crossed a cell boundary; not covered
            }
            tested += 1;
            let fa = spm_pool(&codes, w, h, m, &cfg).unwrap();
            let fb = spm_pool(&moved, w, h, m, &cfg).unwrap();
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn out_of_bounds_locations_are_rejected() {
        let codes = [single_code(70, 10, 0, 1.0)];
        let err = spm_pool(&codes, 64, 64, 8, &PyramidConfig::default()).unwrap_err();
        assert!(matches!(err, Error::LocationOutOfBounds { x: 70, .. }));
    }

    #[test]
    fn basis_index_beyond_m_is_rejected() {
        let codes = [single_code(10, 10, 9, 1.0)];
        let err = spm_pool(&codes, 64, 64, 8, &PyramidConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    // -- serialization -------------------------------------------------------

    #[test]
    fn feature_binary_roundtrip() {
        let f = PooledFeature { values: vec![0.0, 1.5, -2.25, 0.125] };
        let mut buf = Vec::new();
        write_feature(&mut buf, &f).unwrap();
        assert_eq!(read_feature(&mut buf.as_slice()).unwrap(), f);

        let mut bad = buf.clone();
        bad[0] = b'x';
        assert!(matches!(read_feature(&mut bad.as_slice()), Err(Error::BadFeatureData(_))));
        buf.truncate(buf.len() - 1);
        assert!(matches!(read_feature(&mut buf.as_slice()), Err(Error::BadFeatureData(_))));
    }

    #[test]
    fn sparse_text_roundtrip_keeps_nonzeros() {
        let f = PooledFeature { values: vec![0.0, 0.5, 0.0, -0.75, 0.0] };
        let line = to_sparse_text(3, &f);
        assert_eq!(line, "3 2:0.5 4:-0.75");
        let (label, back) = from_sparse_text(&line, 5).unwrap();
        assert_eq!(label, 3);
        assert_eq!(back, f);
        assert!(from_sparse_text("1 9:0.5", 5).is_err());
        assert!(from_sparse_text("", 5).is_err());
    }
}

//! Representation diagnostics: layer-wise cosine homogenization of vision
//! tokens, visual attention allocation, kernel-alignment metrics
//! (HSIC / CKA / CKNNA), and PCA-to-RGB feature maps.
//!
//! Everything accumulates in f64. The CKNNA nearest-neighbor rule is
//! deterministic: neighbors are ranked by kernel value with lower index
//! winning ties.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ForwardTrace;
use crate::tensor::Tensor;

/// Per-layer mean pairwise cosine similarity of vision-token hidden
/// states (length L+1: embeddings plus each block output).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct HomogenizationProfile {
    pub per_layer: Vec<f64>,
}

/// Per-layer mean fraction of attention mass that prediction-producing
/// text positions place on vision positions.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttentionAllocationProfile {
    pub per_layer: Vec<f64>,
}

/// Mean of cos(v_i, v_j) over unordered pairs i < j.
pub fn mean_pairwise_cosine(features: &Tensor) -> Result<f64> {
    let (n, d) = features.dims2("mean_pairwise_cosine")?;
    if n < 2 {
        return Err(Error::invalid(
            "mean_pairwise_cosine",
            format!("need at least 2 rows, got {n}"),
        ));
    }
    let mut unit = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = features.row(i).iter().map(|&v| v as f64).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= crate::tensor::NORM_EPS {
            return Err(Error::NearZeroRow {
                row: i,
                norm,
                min: crate::tensor::NORM_EPS,
            });
        }
        unit.push(row.iter().map(|v| v / norm).collect::<Vec<f64>>());
        let _ = d;
    }
    let mut sum = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            sum += unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(sum / (n * (n - 1) / 2) as f64)
}

/// Homogenization profile of one trace: cosine similarity of the vision
/// rows at every recorded hidden-state level.
pub fn homogenization_profile(trace: &ForwardTrace, vision_rows: &[usize]) -> Result<HomogenizationProfile> {
    let mut per_layer = Vec::with_capacity(trace.hidden.len());
    for h in &trace.hidden {
        let sub = gather_rows(h, vision_rows)?;
        per_layer.push(mean_pairwise_cosine(&sub)?);
    }
    Ok(HomogenizationProfile { per_layer })
}

pub(crate) fn gather_rows(x: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let (n, d) = x.dims2("gather_rows")?;
    let mut out = Tensor::zeros(&[rows.len(), d]);
    for (i, &r) in rows.iter().enumerate() {
        if r >= n {
            return Err(Error::invalid(
                "gather_rows",
                format!("row {r} outside 0..{n}"),
            ));
        }
        out.row_mut(i).copy_from_slice(x.row(r));
    }
    Ok(out)
}

/// Fraction of attention mass on vision columns, per layer: the per-head,
/// per-query fraction is summed from already-normalized rows and then
/// averaged over heads and query positions.
pub fn attention_allocation(
    trace: &ForwardTrace,
    vision_positions: &[usize],
    query_positions: &[usize],
) -> Result<AttentionAllocationProfile> {
    if query_positions.is_empty() {
        return Err(Error::invalid("attention_allocation", "empty query set"));
    }
    if trace.attn.is_empty() {
        return Err(Error::invalid(
            "attention_allocation",
            "trace has no captured attention (forward ran with capture=false)",
        ));
    }
    let mut per_layer = Vec::with_capacity(trace.attn.len());
    for attn in &trace.attn {
        let (heads, t, t2) = attn.dims3("attention_allocation")?;
        debug_assert_eq!(t, t2);
        let mut acc = 0.0f64;
        for h in 0..heads {
            for &q in query_positions {
                if q >= t {
                    return Err(Error::invalid(
                        "attention_allocation",
                        format!("query {q} outside 0..{t}"),
                    ));
                }
                let row = &attn.data()[(h * t + q) * t..(h * t + q + 1) * t];
                let mut mass = 0.0f64;
                for &v in vision_positions {
                    mass += row[v] as f64;
                }
                acc += mass;
            }
        }
        per_layer.push(acc / (heads * query_positions.len()) as f64);
    }
    Ok(AttentionAllocationProfile { per_layer })
}

// ---------------------------------------------------------------------------
// Kernel alignment
// ---------------------------------------------------------------------------

/// Inner-product kernel of a feature set: `K_ij = <x_i, x_j>` in f64.
pub fn inner_product_kernel(x: &Tensor) -> Result<Vec<f64>> {
    let (n, _d) = x.dims2("inner_product_kernel")?;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| x.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut k = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
        }
    }
    Ok(k)
}

fn square_dim(k: &Tensor, op: &'static str) -> Result<usize> {
    let (n, m) = k.dims2(op)?;
    if n != m {
        return Err(Error::shape(op, format!("kernel is [{n},{m}], not square")));
    }
    if n < 2 {
        return Err(Error::invalid(op, format!("kernel needs N >= 2, got {n}")));
    }
    Ok(n)
}

fn hsic_centered(k: &[f64], l: &[f64], n: usize) -> f64 {
    let k_mean = k.iter().sum::<f64>() / (n * n) as f64;
    let l_mean = l.iter().sum::<f64>() / (n * n) as f64;
    let mut acc = 0.0f64;
    for i in 0..n * n {
        acc += (k[i] - k_mean) * (l[i] - l_mean);
    }
    acc / ((n - 1) * (n - 1)) as f64
}

/// Hilbert-Schmidt independence criterion in the centered-product form:
/// `1/(N-1)^2 * sum_ij (K_ij - mean K)(L_ij - mean L)`.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let n = square_dim(k, "hsic")?;
    let nl = square_dim(l, "hsic")?;
    if n != nl {
        return Err(Error::shape("hsic", format!("kernels are {n} and {nl} wide")));
    }
    let kd: Vec<f64> = k.data().iter().map(|&v| v as f64).collect();
    let ld: Vec<f64> = l.data().iter().map(|&v| v as f64).collect();
    Ok(hsic_centered(&kd, &ld, n))
}

/// Centered kernel alignment: `HSIC(K,L) / sqrt(HSIC(K,K) HSIC(L,L))`.
/// Zero-variance kernels are rejected rather than divided by.
pub fn cka(k: &Tensor, l: &Tensor) -> Result<f64> {
    let kk = hsic(k, k)?;
    let ll = hsic(l, l)?;
    if kk <= 0.0 {
        return Err(Error::DegenerateKernel {
            reason: format!("first kernel has zero variance (HSIC(K,K) = {kk:e})"),
        });
    }
    if ll <= 0.0 {
        return Err(Error::DegenerateKernel {
            reason: format!("second kernel has zero variance (HSIC(L,L) = {ll:e})"),
        });
    }
    Ok(hsic(k, l)? / (kk * ll).sqrt())
}

/// Indices of the `k` nearest neighbors of every row under a kernel:
/// largest kernel value first, self excluded, ties broken toward the
/// lower index.
fn knn_sets(kernel: &[f64], n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut sets = Vec::with_capacity(n);
    for i in 0..n {
        let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            kernel[i * n + b]
                .partial_cmp(&kernel[i * n + a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        sets.push(order);
    }
    sets
}

fn hsic_knn(
    k_mat: &[f64],
    l_mat: &[f64],
    n: usize,
    knn_first: &[Vec<usize>],
    knn_second: &[Vec<usize>],
) -> f64 {
    let k_mean = k_mat.iter().sum::<f64>() / (n * n) as f64;
    let l_mean = l_mat.iter().sum::<f64>() / (n * n) as f64;
    let mut acc = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // mutual membership: i among j's neighbors in the second
            // kernel's space, j among i's neighbors in the first's
            if !knn_second[j].contains(&i) || !knn_first[i].contains(&j) {
                continue;
            }
            acc += (k_mat[i * n + j] - k_mean) * (l_mat[i * n + j] - l_mean);
        }
    }
    acc / ((n - 1) * (n - 1)) as f64
}

/// Nearest-neighbor-restricted kernel alignment of two feature sets
/// (inner-product kernels). `k` must lie in `1..=N-1`.
pub fn cknna(features_a: &Tensor, features_b: &Tensor, k: usize) -> Result<f64> {
    let (n, _) = features_a.dims2("cknna")?;
    let (nb, _) = features_b.dims2("cknna")?;
    if n != nb {
        return Err(Error::shape("cknna", format!("{n} vs {nb} rows")));
    }
    if k == 0 || k >= n {
        return Err(Error::invalid(
            "cknna",
            format!("k = {k} outside 1..={}", n - 1),
        ));
    }
    let k_mat = inner_product_kernel(features_a)?;
    let l_mat = inner_product_kernel(features_b)?;
    let knn_k = knn_sets(&k_mat, n, k);
    let knn_l = knn_sets(&l_mat, n, k);

    let kl = hsic_knn(&k_mat, &l_mat, n, &knn_k, &knn_l);
    let kk = hsic_knn(&k_mat, &k_mat, n, &knn_k, &knn_k);
    let ll = hsic_knn(&l_mat, &l_mat, n, &knn_l, &knn_l);
    if kk <= 0.0 || ll <= 0.0 {
        return Err(Error::DegenerateKernel {
            reason: format!("kNN-restricted kernel variance vanished (kk {kk:e}, ll {ll:e})"),
        });
    }
    Ok(kl / (kk * ll).sqrt())
}

// ---------------------------------------------------------------------------
// PCA feature maps
// ---------------------------------------------------------------------------

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (f64,
/// row-major). Returns (eigenvalues, eigenvectors as columns), sorted by
/// eigenvalue descending.
fn jacobi_eigen(mut a: Vec<f64>, d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = a[p * d + p];
                let aqq = a[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..d {
                    let aip = a[i * d + p];
                    let aiq = a[i * d + q];
                    a[i * d + p] = c * aip - s * aiq;
                    a[i * d + q] = s * aip + c * aiq;
                }
                for j in 0..d {
                    let apj = a[p * d + j];
                    let aqj = a[q * d + j];
                    a[p * d + j] = c * apj - s * aqj;
                    a[q * d + j] = s * apj + c * aqj;
                }
                for i in 0..d {
                    let vip = v[i * d + p];
                    let viq = v[i * d + q];
                    v[i * d + p] = c * vip - s * viq;
                    v[i * d + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| a[y * d + y].partial_cmp(&a[x * d + x]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vectors = vec![0.0f64; d * d];
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..d {
            vectors[i * d + dst] = v[i * d + src];
        }
    }
    (eigenvalues, vectors)
}

/// Principal-component projection: mean-center, eigendecompose the sample
/// covariance, project onto the top `n_components` components. Components
/// are sign-fixed so their largest-magnitude loading is positive. Returns
/// the scores [N, n_components] and the matching eigenvalues. Rejects
/// inputs whose covariance rank is below `n_components`.
pub fn pca_project(features: &Tensor, n_components: usize) -> Result<(Tensor, Vec<f64>)> {
    let (n, d) = features.dims2("pca_project")?;
    if d < n_components || n < 2 {
        return Err(Error::invalid(
            "pca_project",
            format!("need N >= 2 and D >= {n_components}, got [{n},{d}]"),
        ));
    }
    let mut centered = vec![0.0f64; n * d];
    for j in 0..d {
        let mean = (0..n).map(|i| features.data()[i * d + j] as f64).sum::<f64>() / n as f64;
        for i in 0..n {
            centered[i * d + j] = features.data()[i * d + j] as f64 - mean;
        }
    }
    let mut cov = vec![0.0f64; d * d];
    for i in 0..n {
        for a in 0..d {
            let ca = centered[i * d + a];
            if ca == 0.0 {
                continue;
            }
            for b in 0..d {
                cov[a * d + b] += ca * centered[i * d + b];
            }
        }
    }
    let denom = (n - 1) as f64;
    for vcov in cov.iter_mut() {
        *vcov /= denom;
    }
    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let (eigenvalues, vectors) = jacobi_eigen(cov, d);
    let tol = 1e-9 * trace.max(1e-300);
    let rank = eigenvalues.iter().filter(|&&l| l > tol).count();
    if rank < n_components {
        return Err(Error::RankDeficient {
            rank,
            needed: n_components,
        });
    }

    // sign convention: the largest-|loading| coordinate of each component
    // is positive
    let mut components = vec![0.0f64; n_components * d];
    for c in 0..n_components {
        let mut best = 0usize;
        for i in 1..d {
            if vectors[i * d + c].abs() > vectors[best * d + c].abs() {
                best = i;
            }
        }
        let sign = if vectors[best * d + c] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            components[c * d + i] = sign * vectors[i * d + c];
        }
    }

    let mut scores = Tensor::zeros(&[n, n_components]);
    for i in 0..n {
        for c in 0..n_components {
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += centered[i * d + j] * components[c * d + j];
            }
            scores.data_mut()[i * n_components + c] = acc as f32;
        }
    }
    Ok((scores, eigenvalues[..n_components].to_vec()))
}

/// Top-3 principal components of the feature rows rendered as an RGB
/// image over the token grid, each channel min-max scaled to 0..=255.
pub fn pca_rgb(features: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let (n, _d) = features.dims2("pca_rgb")?;
    if n != rows * cols {
        return Err(Error::shape(
            "pca_rgb",
            format!("{n} feature rows vs {rows}x{cols} grid"),
        ));
    }
    let (scores, _eigenvalues) = pca_project(features, 3)?;
    let mut out = vec![0u8; n * 3];
    for c in 0..3 {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = scores.data()[i * 3 + c] as f64;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        for i in 0..n {
            let v = (scores.data()[i * 3 + c] as f64 - lo) / span;
            out[i * 3 + c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Binary PPM (P6) writer for the PCA maps.
pub fn write_ppm(path: impl AsRef<Path>, rows: usize, cols: usize, rgb: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if rgb.len() != rows * cols * 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("{} bytes for {rows}x{cols}x3", rgb.len()),
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write!(f, "P6\n{cols} {rows}\n255\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(rgb).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Binary PGM (P5) writer, for single-channel dumps.
pub fn write_pgm(path: impl AsRef<Path>, rows: usize, cols: usize, gray: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if gray.len() != rows * cols {
        return Err(Error::shape(
            "write_pgm",
            format!("{} bytes for {rows}x{cols}", gray.len()),
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    write!(f, "P5\n{cols} {rows}\n255\n").map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(gray).map_err(|e| Error::io(path.display().to_string(), e))
}

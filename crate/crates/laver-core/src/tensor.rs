//! Dense tensor substrate: row-major f32 buffers, a seeded portable RNG,
//! and the numeric kernels the rest of the crate builds on.
//!
//! Storage is 32-bit; reductions (softmax denominators, norms, moments)
//! accumulate in 64-bit. All kernels are pure functions and safe to call
//! concurrently on shared inputs.

use std::io::{Read, Write};
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stability floor added to the variance in [`layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-5;
/// Minimum row norm accepted by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Dense N-dimensional array of f32 in row-major order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    /// Wrap an existing buffer. Fails when the element count does not
    /// match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Interpret as a matrix, returning (rows, cols).
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected rank 2, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.shape.len() != 3 {
            return Err(Error::shape(
                op,
                format!("expected rank 3, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1], self.shape[2]))
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    /// True when every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Seeded pseudo-random stream.
///
/// Algorithm: ChaCha8 (via `rand_chacha`), a documented counter-based
/// generator whose word stream is identical for identical seeds on every
/// platform. Gaussian draws use the Box-Muller transform on top of the
/// uniform stream, consuming exactly two uniforms per pair of normals.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn seeded(seed: u64) -> Rng {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// Derive an independent substream, e.g. for sharding data generation.
    pub fn derive(&self, stream: u64) -> Rng {
        // splitmix64 step decorrelates the (seed, stream) pair
        let mut z = self
            .seed
            .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        Rng::seeded(z ^ (z >> 31))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn uniform_range(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo < hi);
        lo + (self.uniform() * (hi - lo) as f64) as usize
    }

    /// Standard normal via Box-Muller; the second value of each pair is
    /// cached so consecutive draws consume the uniform stream evenly.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}

/// Standard matrix product `a[m,k] · b[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: [{m},{ka}] x [{kb},{n}]"),
        ));
    }
    let mut out = vec![0.0f32; m * n];
    matmul_into(a.data(), b.data(), m, ka, n, &mut out);
    Tensor::from_vec(&[m, n], out)
}

/// Raw kernel shared by the model forward/backward paths: `out += a · b`
/// is not provided; `out` is overwritten.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a^T · b` where a is [m,k] and b is [m,n]; used for weight grads.
pub(crate) fn matmul_at_b_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let o_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out = a · b^T` where a is [m,n] and b is [k,n]; used for input grads.
pub(crate) fn matmul_a_bt(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in o_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0f32;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
}

/// Temperature-scaled softmax along the last axis, with max subtraction
/// and a 64-bit denominator.
pub fn softmax(x: &Tensor, temperature: f64) -> Result<Tensor> {
    if temperature <= 0.0 {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax", "rank-0 tensor".to_string()))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        softmax_row_inplace(row, temperature);
    }
    Tensor::from_vec(x.shape(), out)
}

/// In-place softmax of one row. Entries are exp((x-max)/t) / sum.
pub(crate) fn softmax_row_inplace(row: &mut [f32], temperature: f64) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let mut denom = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v as f64 - max) / temperature).exp();
        denom += e;
        *v = e as f32;
    }
    let inv = 1.0 / denom;
    for v in row.iter_mut() {
        *v = (*v as f64 * inv) as f32;
    }
}

/// Normalize each row of `x[n,d]` to unit L2 norm. Rows with norm at or
/// below [`NORM_EPS`] are rejected with their index.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2("l2_normalize")?;
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let row = x.row(i);
        let norm = (row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>()).sqrt();
        if norm <= NORM_EPS {
            return Err(Error::NearZeroRow {
                row: i,
                norm,
                min: NORM_EPS,
            });
        }
        let inv = 1.0 / norm;
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = (v as f64 * inv) as f32;
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// Row-wise layer normalization with affine parameters:
/// `(x - mean) / sqrt(var + eps) * gain + bias`. Moments are f64.
pub fn layernorm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2("layernorm")?;
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::shape(
            "layernorm",
            format!("gain/bias need {d} entries, got {}/{}", gain.numel(), bias.numel()),
        ));
    }
    let mut out = vec![0.0f32; n * d];
    for i in 0..n {
        let row = x.row(i);
        let (mean, rstd) = layernorm_stats(row);
        let g = gain.data();
        let b = bias.data();
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * rstd;
            out[i * d + j] = (xhat * g[j] as f64 + b[j] as f64) as f32;
        }
    }
    Tensor::from_vec(&[n, d], out)
}

/// (mean, 1/sqrt(var + eps)) of one row in f64.
pub(crate) fn layernorm_stats(row: &[f32]) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    (mean, 1.0 / (var + LAYERNORM_EPS).sqrt())
}

/// GELU activation, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v as f64) as f32;
    }
    out
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Fill a tensor with independent Gaussian(0, std) draws.
pub fn sample_gaussian(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = (rng.standard_normal() * std) as f32;
    }
    t
}

// ---------------------------------------------------------------------------
// LVTD tensor dump format
// ---------------------------------------------------------------------------
//
// Layout (little-endian):
//   magic   b"LVTD"
//   version u16 (currently 1)
//   rank    u16
//   extents u64 x rank
//   data    f32 x product(extents), row-major

pub const LVTD_MAGIC: &[u8; 4] = b"LVTD";
pub const LVTD_VERSION: u16 = 1;

pub fn write_lvtd_to(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(LVTD_MAGIC)?;
    w.write_all(&LVTD_VERSION.to_le_bytes())?;
    w.write_all(&(t.shape().len() as u16).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_lvtd_from(r: &mut impl Read, path: &str) -> Result<Tensor> {
    let bad = |details: &str| Error::BadFormat {
        path: path.to_string(),
        details: details.to_string(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != LVTD_MAGIC {
        return Err(bad("missing LVTD magic"));
    }
    let mut u16buf = [0u8; 2];
    r.read_exact(&mut u16buf).map_err(|e| Error::io(path, e))?;
    let version = u16::from_le_bytes(u16buf);
    if version != LVTD_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    r.read_exact(&mut u16buf).map_err(|e| Error::io(path, e))?;
    let rank = u16::from_le_bytes(u16buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut u64buf = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut u64buf).map_err(|e| Error::io(path, e))?;
        shape.push(u64::from_le_bytes(u64buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0f32; n];
    let mut f32buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut f32buf).map_err(|e| Error::io(path, e))?;
        *v = f32::from_le_bytes(f32buf);
    }
    Tensor::from_vec(&shape, data)
}

pub fn write_lvtd(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = std::io::BufWriter::new(&mut f);
    write_lvtd_to(&mut buf, t).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_lvtd(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = std::io::BufReader::new(f);
    read_lvtd_from(&mut buf, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        sample_gaussian(rng, shape, 1.0)
    }

    #[test]
    fn matmul_identity() {
        let mut id = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            id.data_mut()[i * 3 + i] = 1.0;
        }
        let mut rng = Rng::seeded(1);
        let x = random_tensor(&mut rng, &[3, 5]);
        let y = matmul(&id, &x).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_naive_f64_oracle() {
        let mut rng = Rng::seeded(7);
        let a = random_tensor(&mut rng, &[5, 7]);
        let b = random_tensor(&mut rng, &[7, 3]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut acc = 0.0f64;
                for k in 0..7 {
                    acc += a.data()[i * 7 + k] as f64 * b.data()[k * 3 + j] as f64;
                }
                assert_abs_diff_eq!(c.data()[i * 3 + j] as f64, acc, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry_and_limit() {
        let x = Tensor::from_vec(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        let p = softmax(&x, 1.0).unwrap();
        for &v in p.data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-7);
        }
        let x = Tensor::from_vec(&[2], vec![10.0, 0.0]).unwrap();
        let p = softmax(&x, 0.01).unwrap();
        assert!(p.data()[0] > 0.999_999);
        assert!(p.data()[1] < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_formula_at_low_temperature() {
        let mut rng = Rng::seeded(3);
        let x = random_tensor(&mut rng, &[4]);
        let p = softmax(&x, 0.04).unwrap();
        let exps: Vec<f64> = x.data().iter().map(|&v| (v as f64 / 0.04).exp()).collect();
        let denom: f64 = exps.iter().sum();
        let mut sum = 0.0f64;
        for (i, &e) in exps.iter().enumerate() {
            assert_abs_diff_eq!(p.data()[i] as f64, e / denom, epsilon = 1e-6);
            sum += p.data()[i] as f64;
        }
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let x = Tensor::zeros(&[2]);
        assert!(matches!(
            softmax(&x, 0.0),
            Err(Error::NonPositiveTemperature(_))
        ));
        assert!(matches!(
            softmax(&x, -1.0),
            Err(Error::NonPositiveTemperature(_))
        ));
    }

    #[test]
    fn l2_normalize_hand_and_property() {
        let x = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let y = l2_normalize(&x).unwrap();
        assert_abs_diff_eq!(y.data()[0], 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(y.data()[1], 0.8, epsilon = 1e-7);

        // unit row: unchanged up to rounding
        let y2 = l2_normalize(&y).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }

        let mut rng = Rng::seeded(11);
        let x = random_tensor(&mut rng, &[6, 9]);
        let y = l2_normalize(&x).unwrap();
        for i in 0..6 {
            let norm: f64 = y.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            assert_abs_diff_eq!(norm.sqrt(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_row_with_index() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
        match l2_normalize(&x) {
            Err(Error::NearZeroRow { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected NearZeroRow, got {other:?}"),
        }
    }

    #[test]
    fn layernorm_constant_row_yields_bias() {
        let x = Tensor::from_vec(&[1, 4], vec![2.5; 4]).unwrap();
        let gain = Tensor::from_vec(&[4], vec![1.5; 4]).unwrap();
        let bias = Tensor::from_vec(&[4], vec![0.25, -0.5, 0.0, 7.0]).unwrap();
        let y = layernorm(&x, &gain, &bias).unwrap();
        for (o, b) in y.data().iter().zip(bias.data()) {
            assert_abs_diff_eq!(o, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn layernorm_rows_standardized_before_affine() {
        let mut rng = Rng::seeded(5);
        let x = random_tensor(&mut rng, &[8, 16]);
        let gain = Tensor::from_vec(&[16], vec![1.0; 16]).unwrap();
        let bias = Tensor::zeros(&[16]);
        let y = layernorm(&x, &gain, &bias).unwrap();
        for i in 0..8 {
            let row = y.row(i);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-2); // eps in denominator shifts var slightly
        }
    }

    #[test]
    fn gelu_zero_and_grad_consistency() {
        let x = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        assert_eq!(gelu(&x).data()[0], 0.0);
        // derivative vs central difference
        for &v in &[-2.0f64, -0.3, 0.1, 1.7] {
            let h = 1e-5;
            let fd = (gelu_scalar(v + h) - gelu_scalar(v - h)) / (2.0 * h);
            assert_abs_diff_eq!(gelu_grad_scalar(v), fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn gaussian_mean_law_of_large_numbers() {
        let mut rng = Rng::seeded(42);
        let t = sample_gaussian(&mut rng, &[100_000], 1.0);
        let mean: f64 = t.data().iter().map(|&v| v as f64).sum::<f64>() / 1e5;
        assert!(mean.abs() < 0.02, "mean {mean} outside +/-0.02");
    }

    #[test]
    fn rng_same_seed_same_stream() {
        let mut a = Rng::seeded(99);
        let mut b = Rng::seeded(99);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let ta = sample_gaussian(&mut Rng::seeded(7), &[32], 0.02);
        let tb = sample_gaussian(&mut Rng::seeded(7), &[32], 0.02);
        assert_eq!(ta.data(), tb.data()); // bit-identical
    }

    #[test]
    fn kernels_match_f64_reference_on_64x64() {
        let mut rng = Rng::seeded(13);
        let a = random_tensor(&mut rng, &[64, 64]);
        let b = random_tensor(&mut rng, &[64, 64]);
        let c = matmul(&a, &b).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let mut acc = 0.0f64;
                for k in 0..64 {
                    acc += a.data()[i * 64 + k] as f64 * b.data()[k * 64 + j] as f64;
                }
                let rel = (c.data()[i * 64 + j] as f64 - acc).abs() / acc.abs().max(1.0);
                assert!(rel < 1e-5, "matmul rel err {rel} at ({i},{j})");
            }
        }
    }

    #[test]
    fn lvtd_round_trip_bit_exact() {
        let mut rng = Rng::seeded(21);
        let t = random_tensor(&mut rng, &[3, 4, 5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lvtd");
        write_lvtd(&path, &t).unwrap();
        let back = read_lvtd(&path).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn lvtd_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.lvtd");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_lvtd(&path), Err(Error::BadFormat { .. })));
    }
}

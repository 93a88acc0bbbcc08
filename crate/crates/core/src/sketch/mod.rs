//! Count sketch projection and the tensor-sketch kernel.
//!
//! A count sketch hashes each input coordinate to one of `d` buckets with a
//! random sign. The sketch of an outer product of several vectors equals the
//! circular convolution of the per-vector sketches, which is computed here as
//! an element-wise product in the frequency domain. Both directions are
//! exact linear maps, so the backward passes are closed-form adjoints rather
//! than approximations.

pub mod fft;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from, tags};

pub use fft::{dft, idft, idft_symmetric, idft_vec, transform, IMAG_RESIDUE_TOLERANCE};

/// Fixed random hash and sign vectors for one count sketch projection.
///
/// Parameters are immutable after construction; identical `(dims, seed)`
/// always reproduce identical buckets and signs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountSketchParams {
    input_dim: usize,
    sketch_dim: usize,
    buckets: Vec<usize>,
    signs: Vec<i8>,
    seed: u64,
}

impl CountSketchParams {
    /// Draws fresh parameters: buckets uniform over `[0, sketch_dim)`,
    /// signs uniform over {-1, +1}, from a counter-based generator keyed
    /// by `seed`.
    pub fn new(input_dim: usize, sketch_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("count sketch input_dim must be >= 1"));
        }
        if sketch_dim == 0 {
            return Err(Error::invalid("count sketch sketch_dim must be >= 1"));
        }
        let mut rng = rng_from(seed, &[tags::SKETCH_PARAMS]);
        let buckets = (0..input_dim)
            .map(|_| rng.random_range(0..sketch_dim))
            .collect();
        let signs = (0..input_dim)
            .map(|_| if rng.random::<bool>() { 1 } else { -1 })
            .collect();
        Ok(CountSketchParams {
            input_dim,
            sketch_dim,
            buckets,
            signs,
            seed,
        })
    }

    /// Rebuilds parameters from explicit vectors (checkpoint restore).
    pub fn from_parts(
        input_dim: usize,
        sketch_dim: usize,
        buckets: Vec<usize>,
        signs: Vec<i8>,
        seed: u64,
    ) -> Result<Self> {
        if input_dim == 0 || sketch_dim == 0 {
            return Err(Error::invalid("count sketch dims must be >= 1"));
        }
        if buckets.len() != input_dim {
            return Err(Error::dim("count sketch buckets", input_dim, buckets.len()));
        }
        if signs.len() != input_dim {
            return Err(Error::dim("count sketch signs", input_dim, signs.len()));
        }
        if let Some(&b) = buckets.iter().find(|&&b| b >= sketch_dim) {
            return Err(Error::invalid(format!(
                "bucket index {b} out of range [0, {sketch_dim})"
            )));
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("signs must be -1 or +1"));
        }
        Ok(CountSketchParams {
            input_dim,
            sketch_dim,
            buckets,
            signs,
            seed,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn sketch_dim(&self) -> usize {
        self.sketch_dim
    }

    pub fn buckets(&self) -> &[usize] {
        &self.buckets
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Projects `x` to `sketch_dim` buckets by signed scatter-add:
/// `y[j] = sum over n with bucket[n] == j of sign[n] * x[n]`.
pub fn count_sketch(x: &[f64], p: &CountSketchParams) -> Result<Vec<f64>> {
    if x.len() != p.input_dim {
        return Err(Error::dim("count_sketch input", p.input_dim, x.len()));
    }
    let mut y = vec![0.0; p.sketch_dim];
    for ((&v, &b), &s) in x.iter().zip(&p.buckets).zip(&p.signs) {
        y[b] += f64::from(s) * v;
    }
    Ok(y)
}

/// Adjoint of [`count_sketch`]: `g[n] = sign[n] * grad_y[bucket[n]]`.
pub fn count_sketch_backward(grad_y: &[f64], p: &CountSketchParams) -> Result<Vec<f64>> {
    if grad_y.len() != p.sketch_dim {
        return Err(Error::dim(
            "count_sketch_backward gradient",
            p.sketch_dim,
            grad_y.len(),
        ));
    }
    Ok(p.buckets
        .iter()
        .zip(&p.signs)
        .map(|(&b, &s)| f64::from(s) * grad_y[b])
        .collect())
}

/// Circular convolution via the frequency domain:
/// `c = idft(dft(a) o dft(b))`.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("circular_convolve", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("circular_convolve needs length >= 1"));
    }
    let mut spectrum = dft(a);
    for (s, t) in spectrum.iter_mut().zip(dft(b)) {
        *s *= t;
    }
    idft(&spectrum)
}

/// Time-domain reference: `c[k] = sum_j a[j] * b[(k - j) mod n]`.
pub fn circular_convolve_direct(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::dim("circular_convolve_direct", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::invalid("circular_convolve needs length >= 1"));
    }
    let n = a.len();
    let mut c = vec![0.0; n];
    for (j, &aj) in a.iter().enumerate() {
        for (k, ck) in c.iter_mut().enumerate() {
            *ck += aj * b[(k + n - j) % n];
        }
    }
    Ok(c)
}

fn check_tensor_sketch_args(xs: &[&[f64]], ps: &[CountSketchParams]) -> Result<usize> {
    if xs.len() < 2 {
        return Err(Error::invalid(
            "tensor sketch needs at least two input vectors",
        ));
    }
    if xs.len() != ps.len() {
        return Err(Error::dim("tensor_sketch params", xs.len(), ps.len()));
    }
    let d = ps[0].sketch_dim;
    for (i, p) in ps.iter().enumerate() {
        if p.sketch_dim != d {
            return Err(Error::Config(format!(
                "tensor sketch params disagree on sketch_dim: params[0] has {d}, params[{i}] has {}",
                p.sketch_dim
            )));
        }
        if xs[i].len() != p.input_dim {
            return Err(Error::dim(
                format!("tensor_sketch input {i}"),
                p.input_dim,
                xs[i].len(),
            ));
        }
    }
    Ok(d)
}

/// Tensor sketch of two or more vectors: the count sketches are multiplied
/// element-wise in the frequency domain and transformed back, yielding the
/// sketch of the (never materialized) outer product.
///
/// Pairs of count sketches share one transform: two real vectors packed as
/// real/imaginary halves of a single complex input split apart cleanly in
/// the frequency domain (conjugate symmetry), so k factors cost
/// ceil(k/2) + 1 transforms instead of k + 1.
pub fn tensor_sketch(xs: &[&[f64]], ps: &[CountSketchParams]) -> Result<Vec<f64>> {
    let d = check_tensor_sketch_args(xs, ps)?;
    let sketches: Vec<Vec<f64>> = xs
        .iter()
        .zip(ps)
        .map(|(x, p)| count_sketch(x, p))
        .collect::<Result<_>>()?;
    let mut product: Option<Vec<Complex64>> = None;
    let fold = |spectrum: Vec<Complex64>, product: &mut Option<Vec<Complex64>>| {
        match product {
            None => *product = Some(spectrum),
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(spectrum) {
                    *a *= s;
                }
            }
        }
    };
    for pair in sketches.chunks(2) {
        if pair.len() == 2 {
            let mut buf: Vec<Complex64> = pair[0]
                .iter()
                .zip(&pair[1])
                .map(|(&a, &b)| Complex64::new(a, b))
                .collect();
            transform(&mut buf, false);
            // Unpack Z = S1 + i*S2 and fold the pair's product in one pass:
            // S1[t] = (Z[t] + conj(Z[-t]))/2, S2[t] = -i*(Z[t] - conj(Z[-t]))/2.
            // Both factor spectra are conjugate-symmetric, so the product is
            // too; only the lower half needs computing.
            let unpack_mul = |zt: Complex64, zs: Complex64| {
                let s1 = 0.5 * (zt + zs);
                let s2 = Complex64::new(0.0, -0.5) * (zt - zs);
                s1 * s2
            };
            let mut spectrum = vec![Complex64::new(0.0, 0.0); d];
            spectrum[0] = unpack_mul(buf[0], buf[0].conj());
            for t in 1..=d / 2 {
                let v = unpack_mul(buf[t], buf[d - t].conj());
                spectrum[t] = v;
                spectrum[d - t] = v.conj();
            }
            fold(spectrum, &mut product);
        } else {
            fold(dft(&pair[0]), &mut product);
        }
    }
    // The product of conjugate-symmetric spectra is conjugate-symmetric,
    // so the half-length inverse applies.
    idft_symmetric(product.expect("at least two inputs"))
}

/// Gradient of a scalar loss w.r.t. `xs[modality_index]`, frequency-domain
/// adjoint path: correlate the output gradient with the convolution of the
/// other sketches (conjugate multiply + inverse transform), then pull back
/// through the count sketch.
pub fn tensor_sketch_backward(
    grad_y: &[f64],
    xs: &[&[f64]],
    ps: &[CountSketchParams],
    modality_index: usize,
) -> Result<Vec<f64>> {
    let d = check_tensor_sketch_args(xs, ps)?;
    if modality_index >= xs.len() {
        return Err(Error::invalid(format!(
            "modality_index {modality_index} out of range for {} modalities",
            xs.len()
        )));
    }
    if grad_y.len() != d {
        return Err(Error::dim("tensor_sketch_backward gradient", d, grad_y.len()));
    }
    let grad_spectrum = dft(grad_y);
    let mut others = vec![Complex64::new(1.0, 0.0); d];
    for (j, (x, p)) in xs.iter().zip(ps).enumerate() {
        if j == modality_index {
            continue;
        }
        for (acc, s) in others.iter_mut().zip(dft(&count_sketch(x, p)?)) {
            *acc *= s;
        }
    }
    let correlated: Vec<Complex64> = grad_spectrum
        .iter()
        .zip(&others)
        .map(|(g, o)| g * o.conj())
        .collect();
    count_sketch_backward(&idft(&correlated)?, &ps[modality_index])
}

/// Gradients w.r.t. every input at once. Spectra are computed once and
/// combined through prefix/suffix products, so the cost stays linear in the
/// number of modalities.
pub fn tensor_sketch_backward_all(
    grad_y: &[f64],
    xs: &[&[f64]],
    ps: &[CountSketchParams],
) -> Result<Vec<Vec<f64>>> {
    let d = check_tensor_sketch_args(xs, ps)?;
    if grad_y.len() != d {
        return Err(Error::dim("tensor_sketch_backward gradient", d, grad_y.len()));
    }
    let n = xs.len();
    let spectra: Vec<Vec<Complex64>> = xs
        .iter()
        .zip(ps)
        .map(|(x, p)| Ok(dft(&count_sketch(x, p)?)))
        .collect::<Result<_>>()?;

    let one = Complex64::new(1.0, 0.0);
    let mut prefix = vec![vec![one; d]; n + 1];
    for i in 0..n {
        for t in 0..d {
            prefix[i + 1][t] = prefix[i][t] * spectra[i][t];
        }
    }
    let mut suffix = vec![vec![one; d]; n + 1];
    for i in (0..n).rev() {
        for t in 0..d {
            suffix[i][t] = suffix[i + 1][t] * spectra[i][t];
        }
    }

    let grad_spectrum = dft(grad_y);
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let correlated: Vec<Complex64> = (0..d)
            .map(|t| grad_spectrum[t] * (prefix[i][t] * suffix[i + 1][t]).conj())
            .collect();
        grads.push(count_sketch_backward(&idft(&correlated)?, &ps[i])?);
    }
    Ok(grads)
}

/// Literal time-domain form of the fusion-layer backward pass:
/// `g[j] = sign_i[j] * sum_t grad_y[t] * C[(t - bucket_i[j]) mod d]`,
/// with `C` the circular convolution of the other modalities' sketches.
/// Slower than [`tensor_sketch_backward`]; kept as the independent route
/// for gradient verification.
pub fn tensor_sketch_backward_direct(
    grad_y: &[f64],
    xs: &[&[f64]],
    ps: &[CountSketchParams],
    modality_index: usize,
) -> Result<Vec<f64>> {
    let d = check_tensor_sketch_args(xs, ps)?;
    if modality_index >= xs.len() {
        return Err(Error::invalid(format!(
            "modality_index {modality_index} out of range for {} modalities",
            xs.len()
        )));
    }
    if grad_y.len() != d {
        return Err(Error::dim("tensor_sketch_backward gradient", d, grad_y.len()));
    }
    let mut others: Option<Vec<f64>> = None;
    for (j, (x, p)) in xs.iter().zip(ps).enumerate() {
        if j == modality_index {
            continue;
        }
        let sketch = count_sketch(x, p)?;
        others = Some(match others {
            None => sketch,
            Some(acc) => circular_convolve_direct(&acc, &sketch)?,
        });
    }
    let others = others.expect("at least two inputs");

    // corr[a] = sum_t grad_y[t] * others[(t - a) mod d]
    let mut corr = vec![0.0; d];
    for (a, c) in corr.iter_mut().enumerate() {
        for (t, &g) in grad_y.iter().enumerate() {
            *c += g * others[(t + d - a) % d];
        }
    }
    let p = &ps[modality_index];
    Ok(p.buckets
        .iter()
        .zip(&p.signs)
        .map(|(&b, &s)| f64::from(s) * corr[b])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn params_reject_zero_dims() {
        assert!(CountSketchParams::new(0, 4, 1).is_err());
        assert!(CountSketchParams::new(4, 0, 1).is_err());
    }

    #[test]
    fn params_single_bucket_degenerate() {
        let p = CountSketchParams::new(3, 1, 99).unwrap();
        assert_eq!(p.buckets(), &[0, 0, 0]);
    }

    #[test]
    fn params_are_reproducible() {
        let a = CountSketchParams::new(64, 16, 7).unwrap();
        let b = CountSketchParams::new(64, 16, 7).unwrap();
        assert_eq!(a, b);
        let c = CountSketchParams::new(64, 16, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bucket_histogram_is_uniform() {
        // Chi-square goodness of fit over 1e5 draws into 4096 buckets.
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let p = CountSketchParams::new(100_000, 4096, 7).unwrap();
        let mut counts = vec![0usize; 4096];
        for &b in p.buckets() {
            counts[b] += 1;
        }
        let expected = 100_000.0 / 4096.0;
        let stat: f64 = counts
            .iter()
            .map(|&c| {
                let diff = c as f64 - expected;
                diff * diff / expected
            })
            .sum();
        let dist = ChiSquared::new(4095.0).unwrap();
        let p_value = 1.0 - dist.cdf(stat);
        assert!(p_value > 0.001, "chi-square stat {stat}, p {p_value}");
    }

    #[test]
    fn count_sketch_matches_hand_case() {
        let p = CountSketchParams::from_parts(3, 2, vec![0, 1, 0], vec![1, -1, 1], 0).unwrap();
        assert_eq!(count_sketch(&[1.0, 2.0, 3.0], &p).unwrap(), vec![4.0, -2.0]);
    }

    #[test]
    fn count_sketch_identity_embedding() {
        let p =
            CountSketchParams::from_parts(4, 4, vec![0, 1, 2, 3], vec![1, 1, 1, 1], 0).unwrap();
        let x = [0.5, -1.5, 2.0, 3.25];
        assert_eq!(count_sketch(&x, &p).unwrap(), x.to_vec());
        // Gradient passes through unchanged for the identity embedding.
        assert_eq!(count_sketch_backward(&x, &p).unwrap(), x.to_vec());
    }

    #[test]
    fn count_sketch_zero_maps_to_zero() {
        let p = CountSketchParams::new(3, 8, 5).unwrap();
        assert!(count_sketch(&[0.0; 3], &p)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(count_sketch_backward(&[0.0; 8], &p)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn count_sketch_rejects_length_mismatch() {
        let p = CountSketchParams::new(3, 8, 5).unwrap();
        assert!(count_sketch(&[1.0; 4], &p).is_err());
        assert!(count_sketch_backward(&[1.0; 7], &p).is_err());
    }

    #[test]
    fn count_sketch_backward_matches_finite_differences() {
        // d/dx <g, sketch(x)> computed by central differences.
        let p = CountSketchParams::new(5, 3, 11).unwrap();
        let mut rng = rng_from(12, &[]);
        let x = random_vec(&mut rng, 5);
        let g = random_vec(&mut rng, 3);
        let analytic = count_sketch_backward(&g, &p).unwrap();
        let step = 1e-5;
        for i in 0..5 {
            let mut plus = x.clone();
            plus[i] += step;
            let mut minus = x.clone();
            minus[i] -= step;
            let dot = |v: &[f64]| -> f64 {
                count_sketch(v, &p)
                    .unwrap()
                    .iter()
                    .zip(&g)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let fd = (dot(&plus) - dot(&minus)) / (2.0 * step);
            let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-6);
            assert!(rel < 1e-6, "coordinate {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn convolve_matches_hand_case() {
        let c = circular_convolve(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert!((c[0] - 11.0).abs() < 1e-9);
        assert!((c[1] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn convolve_with_delta_is_identity() {
        let a = [1.5, -2.0, 0.25, 4.0];
        let mut delta = [0.0; 4];
        delta[0] = 1.0;
        let c = circular_convolve(&a, &delta).unwrap();
        for (x, y) in a.iter().zip(&c) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn tensor_sketch_zero_factor_gives_zero() {
        let ps = vec![
            CountSketchParams::new(4, 8, 1).unwrap(),
            CountSketchParams::new(3, 8, 2).unwrap(),
        ];
        let x1 = [1.0, 2.0, 3.0, 4.0];
        let x2 = [0.0, 0.0, 0.0];
        let y = tensor_sketch(&[&x1, &x2], &ps).unwrap();
        assert!(y.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn tensor_sketch_matches_outer_product_oracle() {
        // Fully independent oracle: sketch vec(x1 (x) x2) by direct
        // summation under the combined hash (h1[i]+h2[j]) mod d and
        // sign s1[i]*s2[j].
        let mut rng = rng_from(21, &[]);
        let (c1, c2, d) = (4usize, 3usize, 8usize);
        let p1 = CountSketchParams::new(c1, d, 31).unwrap();
        let p2 = CountSketchParams::new(c2, d, 32).unwrap();
        let x1 = random_vec(&mut rng, c1);
        let x2 = random_vec(&mut rng, c2);

        let mut expected = vec![0.0; d];
        for i in 0..c1 {
            for j in 0..c2 {
                let bucket = (p1.buckets()[i] + p2.buckets()[j]) % d;
                let sign = f64::from(p1.signs()[i]) * f64::from(p2.signs()[j]);
                expected[bucket] += sign * x1[i] * x2[j];
            }
        }

        let got = tensor_sketch(&[&x1, &x2], &[p1, p2]).unwrap();
        let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for (g, e) in got.iter().zip(&expected) {
            assert!((g - e).abs() / scale < 1e-9, "{g} vs {e}");
        }
    }

    #[test]
    fn tensor_sketch_rejects_bad_configs() {
        let p1 = CountSketchParams::new(4, 8, 1).unwrap();
        let p2 = CountSketchParams::new(3, 16, 2).unwrap();
        let x1 = [0.0; 4];
        let x2 = [0.0; 3];
        let err = tensor_sketch(&[&x1, &x2], &[p1.clone(), p2]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = tensor_sketch(&[&x1[..]], &[p1]).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn backward_zero_gradient_is_zero() {
        let ps = vec![
            CountSketchParams::new(4, 8, 1).unwrap(),
            CountSketchParams::new(4, 8, 2).unwrap(),
        ];
        let x = [1.0, -2.0, 3.0, 0.5];
        let g = tensor_sketch_backward(&[0.0; 8], &[&x, &x], &ps, 0).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn backward_rejects_bad_modality_index() {
        let ps = vec![
            CountSketchParams::new(4, 8, 1).unwrap(),
            CountSketchParams::new(4, 8, 2).unwrap(),
        ];
        let x = [1.0, -2.0, 3.0, 0.5];
        assert!(tensor_sketch_backward(&[0.0; 8], &[&x, &x], &ps, 2).is_err());
    }

    #[test]
    fn backward_fast_and_direct_paths_agree() {
        let mut rng = rng_from(33, &[]);
        for n_modalities in [2usize, 3, 4] {
            let d = 16;
            let ps: Vec<CountSketchParams> = (0..n_modalities)
                .map(|i| CountSketchParams::new(5 + i, d, 40 + i as u64).unwrap())
                .collect();
            let xs: Vec<Vec<f64>> = ps
                .iter()
                .map(|p| random_vec(&mut rng, p.input_dim()))
                .collect();
            let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
            let g = random_vec(&mut rng, d);
            let all = tensor_sketch_backward_all(&g, &refs, &ps).unwrap();
            for i in 0..n_modalities {
                let fast = tensor_sketch_backward(&g, &refs, &ps, i).unwrap();
                let direct = tensor_sketch_backward_direct(&g, &refs, &ps, i).unwrap();
                let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
                for k in 0..fast.len() {
                    assert!((fast[k] - direct[k]).abs() / scale < 1e-9);
                    assert!((all[i][k] - direct[k]).abs() / scale < 1e-9);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_of_quadratic_loss() {
        let mut rng = rng_from(55, &[]);
        let d = 8;
        let ps = vec![
            CountSketchParams::new(4, d, 70).unwrap(),
            CountSketchParams::new(4, d, 71).unwrap(),
        ];
        let x1 = random_vec(&mut rng, 4);
        let x2 = random_vec(&mut rng, 4);
        let target = random_vec(&mut rng, d);

        let loss = |a: &[f64], b: &[f64]| -> f64 {
            let y = tensor_sketch(&[a, b], &ps).unwrap();
            y.iter().zip(&target).map(|(v, t)| 0.5 * (v - t) * (v - t)).sum()
        };
        let y = tensor_sketch(&[&x1, &x2], &ps).unwrap();
        let grad_y: Vec<f64> = y.iter().zip(&target).map(|(v, t)| v - t).collect();

        let analytic = tensor_sketch_backward_direct(&grad_y, &[&x1, &x2], &ps, 0).unwrap();
        let step = 1e-5;
        for i in 0..4 {
            let mut plus = x1.clone();
            plus[i] += step;
            let mut minus = x1.clone();
            minus[i] -= step;
            let fd = (loss(&plus, &x2) - loss(&minus, &x2)) / (2.0 * step);
            let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1e-3);
            assert!(rel < 1e-6, "coordinate {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn norm_is_preserved_in_expectation() {
        // E[ ||sketch(x)||^2 ] == ||x||^2 over random parameter draws.
        let mut rng = rng_from(77, &[]);
        let x = random_vec(&mut rng, 8);
        let x_norm2: f64 = x.iter().map(|v| v * v).sum();
        let trials = 2000;
        let samples: Vec<f64> = (0..trials)
            .map(|t| {
                let p = CountSketchParams::new(8, 16, 1000 + t as u64).unwrap();
                count_sketch(&x, &p).unwrap().iter().map(|v| v * v).sum()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / trials as f64;
        let var = samples
            .iter()
            .map(|s| (s - mean) * (s - mean))
            .sum::<f64>()
            / (trials as f64 - 1.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - x_norm2).abs() <= 3.0 * se,
            "mean {mean} vs {x_norm2} (se {se})"
        );
    }

    proptest! {
        #[test]
        fn count_sketch_is_linear(
            seed in 0u64..1000,
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let p = CountSketchParams::new(6, 4, seed).unwrap();
            let mut rng = rng_from(seed, &[1]);
            let x = random_vec(&mut rng, 6);
            let z = random_vec(&mut rng, 6);
            let combo: Vec<f64> = x.iter().zip(&z).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = count_sketch(&combo, &p).unwrap();
            let sx = count_sketch(&x, &p).unwrap();
            let sz = count_sketch(&z, &p).unwrap();
            for j in 0..4 {
                prop_assert!((lhs[j] - (alpha * sx[j] + beta * sz[j])).abs() < 1e-12);
            }
        }

        #[test]
        fn count_sketch_adjoint_identity(seed in 0u64..1000) {
            // <sketch(x), g> == <x, sketch_backward(g)>
            let p = CountSketchParams::new(7, 5, seed).unwrap();
            let mut rng = rng_from(seed, &[2]);
            let x = random_vec(&mut rng, 7);
            let g = random_vec(&mut rng, 5);
            let lhs: f64 = count_sketch(&x, &p).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = count_sketch_backward(&g, &p).unwrap().iter().zip(&x).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn convolution_theorem_holds(len in 2usize..=64, seed in 0u64..1000) {
            let mut rng = rng_from(seed, &[3]);
            let a = random_vec(&mut rng, len);
            let b = random_vec(&mut rng, len);
            let fast = circular_convolve(&a, &b).unwrap();
            let direct = circular_convolve_direct(&a, &b).unwrap();
            let scale = direct.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
            for k in 0..len {
                prop_assert!((fast[k] - direct[k]).abs() / scale < 1e-9);
            }
        }
    }
}

//! Discrete Fourier transform over `f64` vectors.
//!
//! Power-of-two lengths take an iterative radix-2 path; every other length
//! falls back to the direct O(n^2) transform. Both paths share the same
//! sign convention: forward uses exp(-2*pi*i*k*t/n), inverse scales by 1/n.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Largest imaginary magnitude the inverse transform silently discards,
/// relative to the real magnitude of the result (floored at unit scale).
/// Anything above it signals a corrupted frequency-domain product.
pub const IMAG_RESIDUE_TOLERANCE: f64 = 1e-8;

/// Forward transform of a real vector.
pub fn dft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&mut buf, false);
    buf
}

/// Inverse transform back to a real vector.
///
/// The imaginary parts of the exact inverse are discarded when they stay
/// below [`IMAG_RESIDUE_TOLERANCE`]; a larger residue is an error.
pub fn idft(spectrum: &[Complex64]) -> Result<Vec<f64>> {
    idft_vec(spectrum.to_vec())
}

/// Inverse transform consuming its buffer; same residue contract as [`idft`].
pub fn idft_vec(mut buf: Vec<Complex64>) -> Result<Vec<f64>> {
    transform(&mut buf, true);
    let mut worst = 0.0f64;
    let mut scale = 1.0f64;
    for v in &buf {
        worst = worst.max(v.im.abs());
        scale = scale.max(v.re.abs());
    }
    if worst > IMAG_RESIDUE_TOLERANCE * scale {
        return Err(Error::Numerical(format!(
            "inverse transform imaginary residue {worst:.3e} exceeds {:.3e}",
            IMAG_RESIDUE_TOLERANCE * scale
        )));
    }
    Ok(buf.into_iter().map(|v| v.re).collect())
}

/// Inverse transform of a conjugate-symmetric spectrum (the spectrum of a
/// real signal), folded into one half-length transform: the even- and
/// odd-indexed output samples ride the real and imaginary lanes of a
/// single complex inverse.
///
/// The caller guarantees symmetry; an asymmetric component is silently
/// folded into the output instead of being reported, so spectra that are
/// only symmetric up to roundoff keep the usual roundoff-level accuracy
/// while corrupted ones are NOT detected here. Odd or trivial lengths fall
/// back to the checked [`idft_vec`].
pub fn idft_symmetric(spectrum: Vec<Complex64>) -> Result<Vec<f64>> {
    let n = spectrum.len();
    if n < 2 || n % 2 != 0 {
        return idft_vec(spectrum);
    }
    let half = n / 2;
    let twiddles = twiddle_table(n);
    // x[2t] = idft_half(X[k] + X[k+half])[t] / 2
    // x[2t+1] = idft_half((X[k] - X[k+half]) * w^-k)[t] / 2
    // Both inner inverses are real, so they share one transform.
    let mut packed: Vec<Complex64> = (0..half)
        .map(|k| {
            let a = spectrum[k] + spectrum[k + half];
            let b = (spectrum[k] - spectrum[k + half]) * twiddles[k].conj();
            Complex64::new(a.re - b.im, a.im + b.re)
        })
        .collect();
    transform(&mut packed, true);
    let mut out = Vec::with_capacity(n);
    for v in &packed {
        out.push(0.5 * v.re);
        out.push(0.5 * v.im);
    }
    Ok(out)
}

/// In-place transform dispatching on length.
pub fn transform(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        radix2(buf, inverse);
    } else {
        let out = naive(buf, inverse);
        buf.copy_from_slice(&out);
    }
    if inverse {
        let scale = 1.0 / n as f64;
        for v in buf.iter_mut() {
            *v *= scale;
        }
    }
}

thread_local! {
    // Forward twiddle tables keyed by transform length. Each worker
    // thread builds its own copy, so lookups never synchronize.
    static TWIDDLES: RefCell<HashMap<usize, Rc<[Complex64]>>> = RefCell::new(HashMap::new());
}

/// Forward twiddle factors w^k = exp(-2*pi*i*k/n) for k in 0..n/2.
fn twiddle_table(n: usize) -> Rc<[Complex64]> {
    TWIDDLES.with(|cell| {
        Rc::clone(cell.borrow_mut().entry(n).or_insert_with(|| {
            (0..n / 2)
                .map(|k| {
                    let angle = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    Complex64::new(angle.cos(), angle.sin())
                })
                .collect()
        }))
    })
}

fn radix2(buf: &mut [Complex64], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());

    // Bit-reversal permutation.
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = (i.reverse_bits() >> (usize::BITS - bits)) as usize;
        if j > i {
            buf.swap(i, j);
        }
    }

    // First stage: twiddle factor is 1, plain add/sub pairs.
    for pair in buf.chunks_exact_mut(2) {
        let b = pair[1];
        pair[1] = pair[0] - b;
        pair[0] += b;
    }

    let twiddles = twiddle_table(n);
    let mut len = 4;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for chunk in buf.chunks_exact_mut(len) {
            let (lo, hi) = chunk.split_at_mut(half);
            let pairs = lo
                .iter_mut()
                .zip(hi.iter_mut())
                .zip(twiddles.iter().step_by(stride));
            if inverse {
                for ((a, b), t) in pairs {
                    let wb = *b * t.conj();
                    *b = *a - wb;
                    *a += wb;
                }
            } else {
                for ((a, b), t) in pairs {
                    let wb = *b * *t;
                    *b = *a - wb;
                    *a += wb;
                }
            }
        }
        len <<= 1;
    }
}

fn naive(buf: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = buf.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..n)
        .map(|t| {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, v) in buf.iter().enumerate() {
                let angle = sign * 2.0 * std::f64::consts::PI * (t * k % n) as f64 / n as f64;
                acc += v * Complex64::new(angle.cos(), angle.sin());
            }
            acc
        })
        .collect()
}

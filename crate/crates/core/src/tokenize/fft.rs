//! Discrete Fourier transform: iterative radix-2 for powers of two,
//! Bluestein's chirp-z algorithm for every other length.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

fn radix2_in_place(a: &mut [Complex64], inverse: bool) {
    let n = a.len();
    debug_assert!(n.is_power_of_two());
    let bits = n.trailing_zeros();
    if bits > 0 {
        for i in 0..n {
            let j = i.reverse_bits() >> (usize::BITS - bits);
            if i < j {
                a.swap(i, j);
            }
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        // Twiddles computed directly per index to avoid drift from repeated products.
        let tw: Vec<Complex64> = (0..half)
            .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / len as f64))
            .collect();
        for chunk in a.chunks_exact_mut(len) {
            let (lo, hi) = chunk.split_at_mut(half);
            for k in 0..half {
                let t = hi[k] * tw[k];
                hi[k] = lo[k] - t;
                lo[k] += t;
            }
        }
        len <<= 1;
    }
}

fn bluestein(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
    let n = x.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };
    // k^2 mod 2n keeps the chirp angle small and exact for large k.
    let chirp: Vec<Complex64> = (0..n)
        .map(|k| {
            let kk = (k as u128 * k as u128 % (2 * n as u128)) as f64;
            Complex64::from_polar(1.0, sign * PI * kk / n as f64)
        })
        .collect();
    let mut a = vec![Complex64::default(); m];
    for k in 0..n {
        a[k] = x[k] * chirp[k];
    }
    let mut b = vec![Complex64::default(); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2_in_place(&mut a, false);
    radix2_in_place(&mut b, false);
    for (u, v) in a.iter_mut().zip(&b) {
        *u *= v;
    }
    radix2_in_place(&mut a, true);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| a[k] * scale * chirp[k]).collect()
}

fn transform(x: &[Complex64], inverse: bool) -> Result<Vec<Complex64>> {
    if x.is_empty() {
        return Err(Error::Parameter("FFT of an empty signal".into()));
    }
    if x.len().is_power_of_two() {
        let mut a = x.to_vec();
        radix2_in_place(&mut a, inverse);
        Ok(a)
    } else {
        Ok(bluestein(x, inverse))
    }
}

/// `X[k] = sum_t x[t] exp(-2 pi i k t / n)`, unnormalised.
pub fn fft(x: &[f64]) -> Result<Vec<Complex64>> {
    let c: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform(&c, false)
}

pub fn fft_complex(x: &[Complex64]) -> Result<Vec<Complex64>> {
    transform(x, false)
}

/// Inverse of [`fft_complex`], including the `1/n` factor.
pub fn ifft(x: &[Complex64]) -> Result<Vec<Complex64>> {
    let n = x.len() as f64;
    Ok(transform(x, true)?.into_iter().map(|v| v / n).collect())
}

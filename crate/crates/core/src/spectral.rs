//! Radix-2 2-D FFT, ideal high-pass filtering and a direct DFT for testing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest extent [`dft2d_oracle`] accepts.
pub const ORACLE_MAX_EXTENT: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexImage {
    h: usize,
    w: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl ComplexImage {
    pub fn new(h: usize, w: usize, re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || re.len() != h * w || im.len() != h * w {
            return Err(Error::shape(format!(
                "complex image {h}x{w} with planes of {} and {}",
                re.len(),
                im.len()
            )));
        }
        if re.iter().chain(&im).any(|v| !v.is_finite()) {
            return Err(Error::contract("complex image has non-finite entries"));
        }
        Ok(ComplexImage { h, w, re, im })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    /// `Σ |X|²`.
    pub fn energy(&self) -> f64 {
        self.re.iter().zip(&self.im).map(|(a, b)| a * a + b * b).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HighPassSpec {
    /// Cutoff radius as a fraction of `min(H, W) / 2`, in `[0, 1)`.
    pub cutoff_ratio: f64,
}

impl Default for HighPassSpec {
    fn default() -> Self {
        HighPassSpec { cutoff_ratio: 0.25 }
    }
}

impl HighPassSpec {
    pub fn new(cutoff_ratio: f64) -> Result<Self> {
        let s = HighPassSpec { cutoff_ratio };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.cutoff_ratio) {
            return Err(Error::config(format!(
                "cutoff_ratio {} must lie in [0, 1)",
                self.cutoff_ratio
            )));
        }
        Ok(())
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] => Ok((h, w)),
        ref s => Err(Error::shape(format!("expected an [H, W] image, got {s:?}"))),
    }
}

fn check_pow2(h: usize, w: usize) -> Result<()> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::config(format!("FFT extents {h}x{w} must be powers of two")));
    }
    Ok(())
}

/// In-place iterative Cooley–Tukey on one strided line.
fn fft_line(re: &mut [f64], im: &mut [f64], inverse: bool) {
    let n = re.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (wr, wi) = ((ang * k as f64).cos(), (ang * k as f64).sin());
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn fft2d_planes(h: usize, w: usize, re: &mut [f64], im: &mut [f64], inverse: bool) {
    for r in 0..h {
        fft_line(&mut re[r * w..(r + 1) * w], &mut im[r * w..(r + 1) * w], inverse);
    }
    let mut cr = vec![0.0; h];
    let mut ci = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            cr[r] = re[r * w + c];
            ci[r] = im[r * w + c];
        }
        fft_line(&mut cr, &mut ci, inverse);
        for r in 0..h {
            re[r * w + c] = cr[r];
            im[r * w + c] = ci[r];
        }
    }
}

/// Unnormalised forward DFT of a real `[H, W]` image.
pub fn fft2d(image: &Tensor) -> Result<ComplexImage> {
    let (h, w) = image_dims(image)?;
    check_pow2(h, w)?;
    let mut re = image.values().to_vec();
    let mut im = vec![0.0; h * w];
    fft2d_planes(h, w, &mut re, &mut im, false);
    Ok(ComplexImage { h, w, re, im })
}

/// Inverse DFT including the `1/(H·W)` factor.
pub fn ifft2d(spectrum: &ComplexImage) -> Result<ComplexImage> {
    let (h, w) = spectrum.dims();
    check_pow2(h, w)?;
    let mut re = spectrum.re.clone();
    let mut im = spectrum.im.clone();
    fft2d_planes(h, w, &mut re, &mut im, true);
    let n = (h * w) as f64;
    re.iter_mut().chain(im.iter_mut()).for_each(|v| *v /= n);
    Ok(ComplexImage { h, w, re, im })
}

/// Direct double-sum DFT; refuses extents above [`ORACLE_MAX_EXTENT`].
pub fn dft2d_oracle(image: &Tensor) -> Result<ComplexImage> {
    let (h, w) = image_dims(image)?;
    if h > ORACLE_MAX_EXTENT || w > ORACLE_MAX_EXTENT {
        return Err(Error::config(format!(
            "oracle DFT refuses {h}x{w}; extents are limited to {ORACLE_MAX_EXTENT}"
        )));
    }
    let x = image.values();
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut sr, mut si) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    // Reduce the phase index exactly before converting to an angle.
                    let k = ((u * y) % h) as f64 / h as f64 + ((v * xx) % w) as f64 / w as f64;
                    let ang = -2.0 * PI * k;
                    sr += x[y * w + xx] * ang.cos();
                    si += x[y * w + xx] * ang.sin();
                }
            }
            re[u * w + v] = sr;
            im[u * w + v] = si;
        }
    }
    Ok(ComplexImage { h, w, re, im })
}

/// Signed frequency of natural-order bin `k` on an axis of length `n`,
/// i.e. its offset from the centre after an fftshift.
fn centred(k: usize, n: usize) -> f64 {
    ((k + n / 2) % n) as f64 - (n / 2) as f64
}

/// Ideal high-pass: zeroes every bin whose centred radius is at most the cutoff.
pub fn high_pass(spectrum: &ComplexImage, spec: HighPassSpec) -> ComplexImage {
    let (h, w) = spectrum.dims();
    let radius = spec.cutoff_ratio * h.min(w) as f64 / 2.0;
    let mut out = spectrum.clone();
    for u in 0..h {
        let dy = centred(u, h);
        for v in 0..w {
            let dx = centred(v, w);
            if (dy * dy + dx * dx).sqrt() <= radius {
                out.re[u * w + v] = 0.0;
                out.im[u * w + v] = 0.0;
            }
        }
    }
    out
}

/// FFT, ideal high-pass, inverse FFT, real part. The discarded imaginary
/// part must be numerically zero.
pub fn spectral_preprocess(image: &Tensor, spec: HighPassSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = image_dims(image)?;
    let filtered = high_pass(&fft2d(image)?, spec);
    let back = ifft2d(&filtered)?;
    let residue = back.im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-9 * image.max_abs().max(1.0);
    if residue > tol {
        return Err(Error::Numerical {
            term: "spectral imaginary residue".into(),
            value: residue,
        });
    }
    Tensor::new(&[h, w], back.re)
}

//! 2D DFT of feature maps, channel-averaged centred magnitude spectra and
//! low/high band energy splits. Everything here runs in f64.

use std::f64::consts::TAU;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{align_spatial, nearest_upsample2x};
use crate::net::{BaseNetwork, MsNetwork};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_BAND_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DftPath {
    /// Radix-2 FFT on power-of-two axes, direct summation otherwise.
    Auto,
    Direct,
}

fn fft_radix2(buf: &mut [Complex64]) {
    let n = buf.len();
    if n < 2 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                // Twiddle from the exact index ratio k / len.
                let w = Complex64::from_polar(1.0, -TAU * k as f64 / len as f64);
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len *= 2;
    }
}

fn dft_direct(buf: &mut [Complex64]) {
    let n = buf.len();
    let src = buf.to_vec();
    for (k, out) in buf.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, &x) in src.iter().enumerate() {
            // Reduce k·m mod n first so the angle stays in [0, 2π).
            let idx = (k * m) % n;
            acc += x * Complex64::from_polar(1.0, -TAU * idx as f64 / n as f64);
        }
        *out = acc;
    }
}

fn dft1d(buf: &mut [Complex64], path: DftPath) {
    if path == DftPath::Auto && buf.len().is_power_of_two() {
        fft_radix2(buf);
    } else {
        dft_direct(buf);
    }
}

/// `X[u,v] = Σ x[m,n] exp(-2πi(um/H + vn/W))` via row then column 1D
/// transforms. `x` is row-major `h × w`.
pub fn dft2d(x: &[f64], h: usize, w: usize) -> Result<Vec<Complex64>> {
    dft2d_with(x, h, w, DftPath::Auto)
}

pub fn dft2d_with(x: &[f64], h: usize, w: usize, path: DftPath) -> Result<Vec<Complex64>> {
    if h == 0 || w == 0 || x.len() != h * w {
        return Err(Error::InvalidShape(format!(
            "dft2d needs {h}x{w} = {} values, got {}",
            h * w,
            x.len()
        )));
    }
    let mut data: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for row in data.chunks_mut(w) {
        dft1d(row, path);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for v in 0..w {
        for u in 0..h {
            col[u] = data[u * w + v];
        }
        dft1d(&mut col, path);
        for u in 0..h {
            data[u * w + v] = col[u];
        }
    }
    Ok(data)
}

/// Moves the zero-frequency bin to `(h/2, w/2)`.
pub fn fftshift<T: Copy>(x: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for u in 0..h {
        for v in 0..w {
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = x[u * w + v];
        }
    }
    out
}

/// Signed frequency of bin `k` of an `n`-point DFT, in cycles per sample.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let signed = if k <= (n - 1) / 2 {
        k as f64
    } else {
        k as f64 - n as f64
    };
    signed / n as f64
}

/// Whether unshifted bin `(u, v)` lies in the central low band.
pub fn in_low_band(u: usize, v: usize, h: usize, w: usize, band_radius: f64) -> bool {
    bin_frequency(u, h).abs().max(bin_frequency(v, w).abs()) <= band_radius / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub height: usize,
    pub width: usize,
    /// Channel mean of `|DFT|`, DC at the centre, row-major.
    pub magnitude: Vec<f64>,
    /// Channel means of the squared-magnitude energy in each band.
    pub low_band_energy: f64,
    pub high_band_energy: f64,
    pub band_radius: f64,
    /// Channel mean of the spatial sum of squares.
    pub spatial_energy: f64,
}

impl SpectrumSummary {
    pub fn total_energy(&self) -> f64 {
        self.low_band_energy + self.high_band_energy
    }

    /// Share of energy outside the low band; zero for an all-zero map.
    pub fn hf_ratio(&self) -> f64 {
        let total = self.total_energy();
        if total > 0.0 {
            self.high_band_energy / total
        } else {
            0.0
        }
    }
}

fn check_band(band_radius: f64) -> Result<()> {
    if !(band_radius > 0.0 && band_radius < 1.0) {
        return Err(Error::OutOfRange(format!("band_radius {band_radius} outside (0, 1)")));
    }
    Ok(())
}

/// Spectrum summary of one `[C, H, W]` feature stack.
pub fn summarize_spectrum<T: Scalar>(features: &Tensor<T>, band_radius: f64) -> Result<SpectrumSummary> {
    check_band(band_radius)?;
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::InvalidShape(format!("expected [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    summarize_planes(features.data(), c, h, w, band_radius)
}

fn summarize_planes<T: Scalar>(data: &[T], c: usize, h: usize, w: usize, band_radius: f64) -> Result<SpectrumSummary> {
    if c == 0 {
        return Err(Error::InvalidShape("no channels to analyse".into()));
    }
    let plane = h * w;
    let low_mask: Vec<bool> = (0..plane)
        .map(|i| in_low_band(i / w, i % w, h, w, band_radius))
        .collect();
    let mut mag = vec![0.0; plane];
    let (mut low, mut high, mut spatial) = (0.0, 0.0, 0.0);
    for ch in 0..c {
        let x: Vec<f64> = data[ch * plane..(ch + 1) * plane]
            .iter()
            .map(|v| v.to_f64_lossy())
            .collect();
        spatial += x.iter().map(|v| v * v).sum::<f64>();
        let spec = dft2d(&x, h, w)?;
        for (i, z) in spec.iter().enumerate() {
            mag[i] += z.norm();
            let e = z.norm_sqr();
            if low_mask[i] {
                low += e;
            } else {
                high += e;
            }
        }
    }
    let cf = c as f64;
    Ok(SpectrumSummary {
        height: h,
        width: w,
        magnitude: fftshift(&mag, h, w).into_iter().map(|m| m / cf).collect(),
        low_band_energy: low / cf,
        high_band_energy: high / cf,
        band_radius,
        spatial_energy: spatial / cf,
    })
}

/// Spectra of every image in a `[N, C, H, W]` batch, combined: magnitudes
/// and energies are batch means, `hf_ratio` is the mean per-image ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpectrum {
    pub summary: SpectrumSummary,
    pub hf_ratio: f64,
    pub images: usize,
}

pub fn summarize_batch<T: Scalar>(features: &Tensor<T>, band_radius: f64) -> Result<BatchSpectrum> {
    check_band(band_radius)?;
    let (n, c, h, w) = features.dims4()?;
    let per = c * h * w;
    let mut acc: Option<SpectrumSummary> = None;
    let mut ratio = 0.0;
    for b in 0..n {
        let s = summarize_planes(&features.data()[b * per..(b + 1) * per], c, h, w, band_radius)?;
        ratio += s.hf_ratio();
        match &mut acc {
            None => acc = Some(s),
            Some(a) => {
                for (m, v) in a.magnitude.iter_mut().zip(&s.magnitude) {
                    *m += v;
                }
                a.low_band_energy += s.low_band_energy;
                a.high_band_energy += s.high_band_energy;
                a.spatial_energy += s.spatial_energy;
            }
        }
    }
    let mut summary = acc.ok_or(Error::EmptyDataset)?;
    let nf = n as f64;
    summary.magnitude.iter_mut().for_each(|m| *m /= nf);
    summary.low_band_energy /= nf;
    summary.high_band_energy /= nf;
    summary.spatial_energy /= nf;
    Ok(BatchSpectrum {
        summary,
        hf_ratio: ratio / nf,
        images: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqReport {
    /// Final-stage features of the single-scale baseline at high resolution.
    pub baseline: BatchSpectrum,
    /// Upsampled, aligned final low-branch features `u(y_L)`.
    pub low: BatchSpectrum,
    /// Final high-branch stage output before the fusion addition.
    pub residual: BatchSpectrum,
    pub band_radius: f64,
    pub warnings: Vec<String>,
}

impl FreqReport {
    pub fn hf_ratios(&self) -> [f64; 3] {
        [self.baseline.hf_ratio, self.low.hf_ratio, self.residual.hf_ratio]
    }
}

/// Batch-norm running statistics never moved from their initial values.
pub fn looks_untrained<T: Scalar>(net: &BaseNetwork<T>) -> bool {
    net.buffers().iter().all(|(name, t)| {
        let init = if name.ends_with("running_var") { T::one() } else { T::zero() };
        t.data().iter().all(|&v| v == init)
    })
}

/// Spectra of the baseline's, the upsampled low branch's and the high
/// branch's pre-fusion final features on a normalized high-resolution probe.
pub fn residual_report<T: Scalar>(
    ms: &MsNetwork<T>,
    baseline: &BaseNetwork<T>,
    probe_high: &Tensor<T>,
    band_radius: f64,
) -> Result<FreqReport> {
    let mut warnings = Vec::new();
    if looks_untrained(ms.low()) || looks_untrained(ms.high()) {
        warnings.push("two-scale network appears untrained".to_string());
    }
    if looks_untrained(baseline) {
        warnings.push("baseline network appears untrained".to_string());
    }
    let (_, base_feats) = baseline.forward(probe_high)?;
    let probe_low = crate::layers::avg_pool2x(probe_high)?;
    let (_, low_feats) = ms.forward_low(&probe_low)?;
    let high = ms.high_features(probe_high, &low_feats)?;
    let residual = high.residuals.last().ok_or(Error::EmptyDataset)?;
    let (_, _, th, tw) = residual.dims4()?;
    let up = align_spatial(&nearest_upsample2x(low_feats.last().unwrap())?, th, tw)?;
    Ok(FreqReport {
        baseline: summarize_batch(base_feats.last().unwrap(), band_radius)?,
        low: summarize_batch(&up, band_radius)?,
        residual: summarize_batch(residual, band_radius)?,
        band_radius,
        warnings,
    })
}

/// `H` lines of `W` comma-separated magnitudes.
pub fn write_spectrum_csv<W: Write>(mut out: W, s: &SpectrumSummary) -> std::io::Result<()> {
    for row in s.magnitude.chunks(s.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Binary 8-bit PGM with `v = round(255·ln(1+m)/ln(1+max))`.
pub fn write_pgm<W: Write>(mut out: W, s: &SpectrumSummary) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n255\n", s.width, s.height)?;
    out.write_all(&pgm_pixels(&s.magnitude))
}

pub fn pgm_pixels(magnitude: &[f64]) -> Vec<u8> {
    let max = magnitude.iter().copied().fold(0.0, f64::max);
    let denom = max.ln_1p();
    magnitude
        .iter()
        .map(|&m| {
            if denom > 0.0 {
                (255.0 * m.ln_1p() / denom).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_dc_only() {
        let x = vec![2.5; 6 * 4];
        let s = dft2d(&x, 6, 4).unwrap();
        assert!((s[0].re - 2.5 * 24.0).abs() < 1e-9);
        assert!(s[1..].iter().all(|z| z.norm() < 1e-9));
    }

    #[test]
    fn impulse_is_flat() {
        let mut x = vec![0.0; 8 * 5];
        x[0] = 1.0;
        for z in dft2d(&x, 8, 5).unwrap() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn frequencies_follow_fft_convention() {
        let f: Vec<f64> = (0..4).map(|k| bin_frequency(k, 4)).collect();
        assert_eq!(f, vec![0.0, 0.25, -0.5, -0.25]);
        let f: Vec<f64> = (0..5).map(|k| bin_frequency(k, 5)).collect();
        assert_eq!(f, vec![0.0, 0.2, 0.4, -0.4, -0.2]);
    }

    #[test]
    fn shift_centres_dc() {
        let x: Vec<usize> = (0..16).collect();
        let s = fftshift(&x, 4, 4);
        assert_eq!(s[2 * 4 + 2], 0);
        let x: Vec<usize> = (0..9).collect();
        assert_eq!(fftshift(&x, 3, 3)[4], 0);
    }

    #[test]
    fn checkerboard_is_all_high() {
        let t = Tensor::<f64>::from_fn(vec![1, 4, 6], |i| {
            if (i / 6 + i % 6) % 2 == 0 { 1.0 } else { -1.0 }
        });
        let s = summarize_spectrum(&t, 0.9).unwrap();
        assert_eq!(s.low_band_energy, 0.0);
        assert!((s.high_band_energy - 24.0 * 24.0).abs() < 1e-9);
        assert_eq!(s.hf_ratio(), 1.0);
    }

    #[test]
    fn pgm_log_scale() {
        assert_eq!(pgm_pixels(&[0.0, 3.0, 1.0]), vec![0, 255, 128]);
        assert_eq!(pgm_pixels(&[0.0, 0.0]), vec![0, 0]);
        let s = SpectrumSummary {
            height: 1,
            width: 2,
            magnitude: vec![0.0, 1.0],
            low_band_energy: 0.0,
            high_band_energy: 0.0,
            band_radius: 0.5,
            spatial_energy: 0.0,
        };
        let mut buf = Vec::new();
        write_pgm(&mut buf, &s).unwrap();
        assert_eq!(buf, b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn band_radius_validated() {
        let t = Tensor::<f64>::ones(vec![1, 2, 2]);
        assert!(summarize_spectrum(&t, 1.0).is_err());
        assert!(summarize_spectrum(&t, 0.0).is_err());
    }
}

//! Image loss `L = L₂ + λ L_S` and its per-pixel first and (diagonal) second
//! derivatives with respect to rendered colour.
//!
//! SSIM uses Gaussian-weighted windows whose weights are renormalised over
//! the taps that fall inside the image, so every window is a proper weighted
//! average. All window sums are separable, which turns the per-pixel double
//! sums of the derivatives into a handful of convolutions.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub c1: f64,
    pub c2: f64,
    /// Odd window side.
    pub window: usize,
    pub sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            window: 11,
            sigma: 1.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || self.window.is_multiple_of(2) || !(self.sigma > 0.0) {
            return Err(Error::InvalidInput(format!(
                "loss config needs λ ≥ 0, an odd window and σ > 0 (got {self:?})"
            )));
        }
        Ok(())
    }

    fn taps(&self) -> Vec<f64> {
        let half = (self.window / 2) as isize;
        let raw: Vec<f64> = (-half..=half)
            .map(|u| (-((u * u) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

/// Per-pixel gradient and diagonal Hessian of a loss with respect to colour.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelLossDerivatives {
    pub width: usize,
    pub height: usize,
    pub g: Vec<[f64; 3]>,
    pub h: Vec<[f64; 3]>,
}

impl PixelLossDerivatives {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            g: vec![[0.0; 3]; width * height],
            h: vec![[0.0; 3]; width * height],
        }
    }

    /// `self += s · other`
    pub fn add_scaled(&mut self, other: &PixelLossDerivatives, s: f64) {
        for (a, b) in self.g.iter_mut().zip(&other.g) {
            for ch in 0..3 {
                a[ch] += s * b[ch];
            }
        }
        for (a, b) in self.h.iter_mut().zip(&other.h) {
            for ch in 0..3 {
                a[ch] += s * b[ch];
            }
        }
    }
}

/// `L₂ = Σ‖c − cᵗ‖² / (6|I|)`, whose gradient is `(c − cᵗ) / (3|I|)`.
pub fn l2_loss_and_derivs(rendered: &Image, target: &Image) -> Result<(f64, PixelLossDerivatives)> {
    target.check_same_dims(rendered)?;
    let n = rendered.len() as f64;
    let mut d = PixelLossDerivatives::zeros(rendered.width, rendered.height);
    let mut sum = 0.0;
    for (i, (c, t)) in rendered.data.iter().zip(&target.data).enumerate() {
        for ch in 0..3 {
            let r = c[ch] - t[ch];
            sum += r * r;
            d.g[i][ch] = r / (3.0 * n);
            d.h[i][ch] = 1.0 / (3.0 * n);
        }
    }
    Ok((sum / (6.0 * n), d))
}

pub fn l2_loss(rendered: &Image, target: &Image) -> Result<f64> {
    target.check_same_dims(rendered)?;
    let sum: f64 = rendered
        .data
        .iter()
        .zip(&target.data)
        .map(|(c, t)| (0..3).map(|ch| (c[ch] - t[ch]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / (6.0 * rendered.len() as f64))
}

/// Window statistics per pixel and channel.
#[derive(Debug, Clone)]
pub struct SsimWindowStats {
    pub width: usize,
    pub height: usize,
    pub mu: [Vec<f64>; 3],
    pub mu_t: [Vec<f64>; 3],
    pub var: [Vec<f64>; 3],
    pub var_t: [Vec<f64>; 3],
    pub cov: [Vec<f64>; 3],
}

/// Separable filter with per-axis renormalisation over in-image taps.
struct Filter {
    taps: Vec<f64>,
    half: usize,
    width: usize,
    height: usize,
    zx: Vec<f64>,
    zy: Vec<f64>,
}

impl Filter {
    fn new(config: &LossConfig, width: usize, height: usize) -> Self {
        let taps = config.taps();
        let half = config.window / 2;
        let norm = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    (0..taps.len())
                        .filter(|&u| (i + u).checked_sub(half).is_some_and(|j| j < n))
                        .map(|u| taps[u])
                        .sum()
                })
                .collect()
        };
        Self {
            zx: norm(width),
            zy: norm(height),
            taps,
            half,
            width,
            height,
        }
    }

    /// Zero-padded separable convolution with `k` (a symmetric kernel).
    fn convolve(&self, plane: &[f64], k: &[f64]) -> Vec<f64> {
        let (w, h, half) = (self.width, self.height, self.half);
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for x in 0..w {
                let acc = if x >= half && x + half < w {
                    k.iter().zip(&row[x - half..]).map(|(kv, v)| kv * v).sum()
                } else {
                    let mut acc = 0.0;
                    for (u, &kv) in k.iter().enumerate() {
                        if let Some(j) = (x + u).checked_sub(half) {
                            if j < w {
                                acc += kv * row[j];
                            }
                        }
                    }
                    acc
                };
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for (u, &kv) in k.iter().enumerate() {
                if let Some(j) = (y + u).checked_sub(half) {
                    if j < h {
                        let src = &tmp[j * w..(j + 1) * w];
                        let dst = &mut out[y * w..(y + 1) * w];
                        for x in 0..w {
                            dst[x] += kv * src[x];
                        }
                    }
                }
            }
        }
        out
    }

    /// Renormalised window average at every pixel.
    fn mean(&self, plane: &[f64]) -> Vec<f64> {
        let mut m = self.convolve(plane, &self.taps);
        self.scale_by_norm(&mut m, -1);
        m
    }

    /// Multiplies each entry by `Z(a)^power`.
    fn scale_by_norm(&self, plane: &mut [f64], power: i32) {
        for y in 0..self.height {
            for x in 0..self.width {
                plane[y * self.width + x] *= (self.zx[x] * self.zy[y]).powi(power);
            }
        }
    }
}

pub fn ssim_window_stats(rendered: &Image, target: &Image, config: &LossConfig) -> Result<SsimWindowStats> {
    target.check_same_dims(rendered)?;
    config.validate()?;
    let (w, h) = rendered.dims();
    if w < config.window || h < config.window {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: config.window,
        });
    }
    let filter = Filter::new(config, w, h);
    let per_channel: Vec<[Vec<f64>; 5]> = (0..3)
        .into_par_iter()
        .map(|ch| {
            let x = rendered.channel(ch);
            let y = target.channel(ch);
            let mu = filter.mean(&x);
            let mu_t = filter.mean(&y);
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
            let exx = filter.mean(&xx);
            let eyy = filter.mean(&yy);
            let exy = filter.mean(&xy);
            let n = w * h;
            let mut var = vec![0.0; n];
            let mut var_t = vec![0.0; n];
            let mut cov = vec![0.0; n];
            for i in 0..n {
                var[i] = (exx[i] - mu[i] * mu[i]).max(0.0);
                var_t[i] = (eyy[i] - mu_t[i] * mu_t[i]).max(0.0);
                cov[i] = exy[i] - mu[i] * mu_t[i];
            }
            [mu, mu_t, var, var_t, cov]
        })
        .collect();
    let mut it = per_channel.into_iter();
    let (a, b, c) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    let [mu0, mt0, v0, vt0, c0] = a;
    let [mu1, mt1, v1, vt1, c1] = b;
    let [mu2, mt2, v2, vt2, c2] = c;
    Ok(SsimWindowStats {
        width: w,
        height: h,
        mu: [mu0, mu1, mu2],
        mu_t: [mt0, mt1, mt2],
        var: [v0, v1, v2],
        var_t: [vt0, vt1, vt2],
        cov: [c0, c1, c2],
    })
}

/// The four window factors: SSIM = f₀ f₁ / (f₂ f₃).
#[inline]
fn factors(s: &SsimWindowStats, ch: usize, i: usize, config: &LossConfig) -> [f64; 4] {
    let (mx, my) = (s.mu[ch][i], s.mu_t[ch][i]);
    [
        2.0 * mx * my + config.c1,
        2.0 * s.cov[ch][i] + config.c2,
        mx * mx + my * my + config.c1,
        s.var[ch][i] + s.var_t[ch][i] + config.c2,
    ]
}

/// Per-channel SSIM map.
pub fn ssim_map(stats: &SsimWindowStats, config: &LossConfig) -> [Vec<f64>; 3] {
    let n = stats.width * stats.height;
    std::array::from_fn(|ch| {
        (0..n)
            .map(|i| {
                let f = factors(stats, ch, i, config);
                f[0] * f[1] / (f[2] * f[3])
            })
            .collect()
    })
}

/// Mean SSIM over pixels and channels.
pub fn mean_ssim(stats: &SsimWindowStats, config: &LossConfig) -> f64 {
    let map = ssim_map(stats, config);
    let n = (stats.width * stats.height) as f64;
    map.iter().map(|m| m.iter().sum::<f64>()).sum::<f64>() / (3.0 * n)
}

/// `L_S = 1 − mean SSIM`, its gradient, and the diagonal of its Hessian.
pub fn ssim_value_and_derivs(
    stats: &SsimWindowStats,
    rendered: &Image,
    target: &Image,
    config: &LossConfig,
) -> Result<(f64, PixelLossDerivatives)> {
    target.check_same_dims(rendered)?;
    if rendered.dims() != (stats.width, stats.height) {
        return Err(Error::DimensionMismatch {
            expected: (stats.width, stats.height),
            actual: rendered.dims(),
        });
    }
    let (w, h) = rendered.dims();
    let n = w * h;
    let filter = Filter::new(config, w, h);
    let taps2: Vec<f64> = filter.taps.iter().map(|k| k * k).collect();
    let scale = -1.0 / (3.0 * n as f64);

    let per_channel: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..3)
        .into_par_iter()
        .map(|ch| {
            let x = rendered.channel(ch);
            let y = target.channel(ch);
            // per-window coefficients of ∂S(a)/∂x_m = w_am (A + B x_m + C y_m)
            // and of the w² part of ∂²S(a)/∂x_m²
            let mut planes: [Vec<f64>; 8] = std::array::from_fn(|_| vec![0.0; n]);
            let mut ssim_sum = 0.0;
            for i in 0..n {
                let [f0, f1, f2, f3] = factors(stats, ch, i, config);
                let (mx, my) = (stats.mu[ch][i], stats.mu_t[ch][i]);
                let num = f0 * f1;
                let den = f2 * f3;
                let (d2, d3) = (den * den, den * den * den);
                ssim_sum += num / den;
                let alpha = 2.0 * my * f1 - 2.0 * f0 * my;
                let beta = 2.0 * f0;
                let gamma = 2.0 * mx * f3 - 2.0 * f2 * mx;
                let delta = 2.0 * f2;
                let a = alpha / den - num * gamma / d2;
                let b = -num * delta / d2;
                let c = beta / den;
                let c1 = -8.0 * my * my / den - 2.0 * alpha * gamma / d2
                    - num * (2.0 * f3 - 2.0 * f2 - 8.0 * mx * mx) / d2
                    + 2.0 * num * gamma * gamma / d3;
                let cx = -2.0 * alpha * delta / d2 - 8.0 * num * mx / d2 + 4.0 * num * gamma * delta / d3;
                let cy = 8.0 * my / den - 2.0 * beta * gamma / d2;
                let cxy = -2.0 * beta * delta / d2;
                let cxx = 2.0 * num * delta * delta / d3;
                for (p, v) in planes.iter_mut().zip([a, b, c, c1, cx, cy, cxy, cxx]) {
                    p[i] = v;
                }
            }
            let [pa, pb, pc, p1, px, py, pxy, pxx] = planes;
            let by_z = |mut p: Vec<f64>, power: i32| {
                filter.scale_by_norm(&mut p, power);
                p
            };
            let ka = filter.convolve(&by_z(pa, -1), &filter.taps);
            let kb = filter.convolve(&by_z(pb, -1), &filter.taps);
            let kc = filter.convolve(&by_z(pc, -1), &filter.taps);
            let k1 = filter.convolve(&by_z(p1, -2), &taps2);
            let kx = filter.convolve(&by_z(px, -2), &taps2);
            let ky = filter.convolve(&by_z(py, -2), &taps2);
            let kxy = filter.convolve(&by_z(pxy, -2), &taps2);
            let kxx = filter.convolve(&by_z(pxx, -2), &taps2);
            let mut g = vec![0.0; n];
            let mut hd = vec![0.0; n];
            for m in 0..n {
                let (xm, ym) = (x[m], y[m]);
                g[m] = scale * (ka[m] + kb[m] * xm + kc[m] * ym);
                hd[m] = scale * (kb[m] + k1[m] + kx[m] * xm + ky[m] * ym + kxy[m] * xm * ym + kxx[m] * xm * xm);
            }
            (ssim_sum, g, hd)
        })
        .collect();

    let mut d = PixelLossDerivatives::zeros(w, h);
    let mut total = 0.0;
    for (ch, (s, g, hd)) in per_channel.into_iter().enumerate() {
        total += s;
        for m in 0..n {
            d.g[m][ch] = g[m];
            d.h[m][ch] = hd[m];
        }
    }
    Ok((1.0 - total / (3.0 * n as f64), d))
}

pub fn ssim_loss(rendered: &Image, target: &Image, config: &LossConfig) -> Result<f64> {
    let stats = ssim_window_stats(rendered, target, config)?;
    Ok(1.0 - mean_ssim(&stats, config))
}

/// `L = L₂ + λ L_S` with λ-weighted derivatives.
pub fn total_loss_derivs(rendered: &Image, target: &Image, config: &LossConfig) -> Result<(f64, PixelLossDerivatives)> {
    let (l2, mut d) = l2_loss_and_derivs(rendered, target)?;
    if config.lambda == 0.0 {
        return Ok((l2, d));
    }
    let stats = ssim_window_stats(rendered, target, config)?;
    let (ls, ds) = ssim_value_and_derivs(&stats, rendered, target, config)?;
    d.add_scaled(&ds, config.lambda);
    Ok((l2 + config.lambda * ls, d))
}

pub fn total_loss(rendered: &Image, target: &Image, config: &LossConfig) -> Result<f64> {
    let l2 = l2_loss(rendered, target)?;
    if config.lambda == 0.0 {
        return Ok(l2);
    }
    Ok(l2 + config.lambda * ssim_loss(rendered, target, config)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
    }

    // smooth-ish pair so SSIM is far from its trivial regimes
    fn related_pair(rng: &mut impl Rng, w: usize, h: usize) -> (Image, Image) {
        let t = Image::from_fn(w, h, |x, y| {
            let f = (x as f64 * 0.3).sin() * (y as f64 * 0.2).cos();
            [0.5 + 0.3 * f, 0.4 + 0.2 * f * f, 0.6 - 0.25 * f]
        });
        let r = Image::from_fn(w, h, |x, y| {
            let p = t.get(x, y);
            [
                p[0] + rng.random_range(-0.1..0.1),
                p[1] + rng.random_range(-0.1..0.1),
                p[2] + rng.random_range(-0.1..0.1),
            ]
        });
        (r, t)
    }

    #[test]
    fn l2_identical_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 12, 12);
        let (l, d) = l2_loss_and_derivs(&a, &a).unwrap();
        assert_eq!(l, 0.0);
        assert!(d.g.iter().all(|g| *g == [0.0; 3]));
    }

    #[test]
    fn l2_single_pixel_offset() {
        let t = Image::new(10, 10);
        let mut r = t.clone();
        r.set(3, 4, [0.3, 0.0, 0.0]);
        let (_, d) = l2_loss_and_derivs(&r, &t).unwrap();
        assert!((d.g[43][0] - 0.001).abs() < 1e-15);
        assert!(d.h.iter().all(|h| h.iter().all(|&v| (v - 1.0 / 300.0).abs() < 1e-18)));
    }

    #[test]
    fn l2_dimension_mismatch() {
        assert!(matches!(
            l2_loss_and_derivs(&Image::new(4, 4), &Image::new(4, 5)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn window_taps_are_normalised_and_symmetric() {
        let t = LossConfig::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn stats_of_constant_and_identical_images() {
        let c = Image::filled(16, 14, [0.25, 0.5, 0.75]);
        let s = ssim_window_stats(&c, &c, &LossConfig::default()).unwrap();
        for ch in 0..3 {
            assert!(s.mu[ch].iter().all(|&m| (m - c.data[0][ch]).abs() < 1e-15));
            assert!(s.var[ch].iter().all(|&v| v.abs() < 1e-15));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 16, 16);
        let s = ssim_window_stats(&a, &a, &LossConfig::default()).unwrap();
        for ch in 0..3 {
            for i in 0..256 {
                assert_eq!(s.mu[ch][i], s.mu_t[ch][i]);
                assert!((s.cov[ch][i] - s.var[ch][i]).abs() < 1e-15);
                assert_eq!(s.var[ch][i], s.var_t[ch][i]);
            }
        }
    }

    #[test]
    fn image_smaller_than_window() {
        let a = Image::new(10, 20);
        assert!(matches!(
            ssim_window_stats(&a, &a, &LossConfig::default()),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn stats_match_direct_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (19, 15);
        let a = random_image(&mut rng, w, h);
        let b = random_image(&mut rng, w, h);
        let cfg = LossConfig::default();
        let s = ssim_window_stats(&a, &b, &cfg).unwrap();
        for py in 0..h {
            for px in 0..w {
                let mut sum = [0.0; 6];
                for v in -5i64..=5 {
                    for u in -5i64..=5 {
                        let (x, y) = (px as i64 + u, py as i64 + v);
                        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                            continue;
                        }
                        let wgt = (-((u * u + v * v) as f64) / (2.0 * 1.5 * 1.5)).exp();
                        let (ra, rb) = (a.get(x as usize, y as usize)[1], b.get(x as usize, y as usize)[1]);
                        for (k, val) in [1.0, ra, rb, ra * ra, rb * rb, ra * rb].into_iter().enumerate() {
                            sum[k] += wgt * val;
                        }
                    }
                }
                let [z, sa, sb, saa, sbb, sab] = sum;
                let (ma, mb) = (sa / z, sb / z);
                let i = py * w + px;
                assert!((s.mu[1][i] - ma).abs() < 1e-12);
                assert!((s.mu_t[1][i] - mb).abs() < 1e-12);
                assert!((s.var[1][i] - (saa / z - ma * ma)).abs() < 1e-12);
                assert!((s.var_t[1][i] - (sbb / z - mb * mb)).abs() < 1e-12);
                assert!((s.cov[1][i] - (sab / z - ma * mb)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_images_have_unit_ssim_and_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_image(&mut rng, 16, 16);
        let cfg = LossConfig::default();
        let s = ssim_window_stats(&a, &a, &cfg).unwrap();
        let (l, d) = ssim_value_and_derivs(&s, &a, &a, &cfg).unwrap();
        assert!(l.abs() < 1e-14);
        assert!(d.g.iter().flatten().all(|g| g.abs() < 1e-14));
        let c = Image::filled(16, 16, [0.3, 0.6, 0.9]);
        let s = ssim_window_stats(&c, &c, &cfg).unwrap();
        let (_, d) = ssim_value_and_derivs(&s, &c, &c, &cfg).unwrap();
        assert!(d.g.iter().flatten().all(|g| g.abs() < 1e-14));
    }

    fn perturbed(img: &Image, m: usize, ch: usize, dv: f64) -> Image {
        let mut out = img.clone();
        out.data[m][ch] += dv;
        out
    }

    #[test]
    fn ssim_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = LossConfig::default();
        for trial in 0..2 {
            let (r, t) = if trial == 0 { related_pair(&mut rng, 32, 32) } else {
                (random_image(&mut rng, 32, 32), random_image(&mut rng, 32, 32))
            };
            let s = ssim_window_stats(&r, &t, &cfg).unwrap();
            let (_, d) = ssim_value_and_derivs(&s, &r, &t, &cfg).unwrap();
            // every pixel of one channel, plus border and interior samples of the others
            let mut ana = Vec::new();
            let mut num = Vec::new();
            let mut ana_h = Vec::new();
            let mut num_h = Vec::new();
            for m in (0..1024).step_by(7).chain([0, 31, 1023, 528]) {
                for ch in 0..3 {
                    let f = |v: f64| ssim_loss(&perturbed(&r, m, ch, v), &t, &cfg).unwrap();
                    ana.push(d.g[m][ch]);
                    num.push(fd::richardson(f, 0.0, 1e-3));
                    ana_h.push(d.h[m][ch]);
                    num_h.push(fd::second(f, 0.0, 1e-3));
                }
            }
            let e = fd::rel_err(&ana, &num, 1e-12);
            assert!(e < 1e-4, "gradient rel err {e:e}");
            let eh = fd::rel_err(&ana_h, &num_h, 1e-12);
            assert!(eh < 1e-3, "hessian rel err {eh:e}");
        }
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (r, t) = related_pair(&mut rng, 20, 18);
        let cfg0 = LossConfig {
            lambda: 0.0,
            ..Default::default()
        };
        assert_eq!(total_loss_derivs(&r, &t, &cfg0).unwrap(), l2_loss_and_derivs(&r, &t).unwrap());
        let cfg = LossConfig::default();
        let (l, d) = total_loss_derivs(&r, &t, &cfg).unwrap();
        assert!((l - total_loss(&r, &t, &cfg).unwrap()).abs() < 1e-15);
        for m in [0usize, 17, 200, 359] {
            for ch in 0..3 {
                let f = |v: f64| total_loss(&perturbed(&r, m, ch, v), &t, &cfg).unwrap();
                let n = fd::richardson(f, 0.0, 1e-3);
                assert!((d.g[m][ch] - n).abs() <= 1e-6 * n.abs().max(1e-6));
            }
        }
    }
}

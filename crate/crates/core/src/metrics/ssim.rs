use crate::data::Image;

use super::MetricsError;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of `[0, 1]` images.
pub const SSIM_RANGE: f64 = 1.0;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

pub(crate) fn check_same(op: &str, a: &Image, b: &Image) -> Result<(), MetricsError> {
    if !a.same_size(b) {
        return Err(MetricsError::Shape(format!(
            "{op}: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// Valid-mode separable Gaussian filter of one plane.
fn filter(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(k, t)| t * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Local SSIM from windowed moments. Written so that identical inputs give
/// identical numerator and denominator, hence exactly 1.
pub(crate) fn ssim_from_moments(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64) -> f64 {
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    let num = (mu_a * mu_b + mu_a * mu_b + c1) * (cov + cov + c2);
    let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
    num / den
}

/// Mean local SSIM over every valid 11×11 Gaussian window, per channel, then
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_same("ssim", a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricsError::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {w}x{h}")));
    }
    let taps = gaussian_taps();
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = (0..w * h).map(|i| f64::from(a.data[i * 3 + ch])).collect();
        let pb: Vec<f64> = (0..w * h).map(|i| f64::from(b.data[i * 3 + ch])).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter(&pa, w, h, &taps);
        let mu_b = filter(&pb, w, h, &taps);
        let e_aa = filter(&prod(&pa, &pa), w, h, &taps);
        let e_bb = filter(&prod(&pb, &pb), w, h, &taps);
        let e_ab = filter(&prod(&pa, &pb), w, h, &taps);
        let n = mu_a.len();
        let sum: f64 = (0..n).map(|i| ssim_from_moments(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i])).sum();
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Mean of `(255·(a − b))²` over all pixels and channels.
pub fn mse_255(a: &Image, b: &Image) -> Result<f64, MetricsError> {
    check_same("mse_255", a, b)?;
    let sq: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum();
    Ok(65025.0 * (sq / a.data.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_normalised_and_symmetric() {
        let t = gaussian_taps();
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..SSIM_WINDOW {
            assert_eq!(t[i], t[SSIM_WINDOW - 1 - i]);
        }
    }

    #[test]
    fn identical_images_score_one() {
        let mut img = Image::new(16, 12);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 101) as f32 / 100.0;
        }
        assert_eq!(ssim(&img, &img).unwrap(), 1.0);
    }

    #[test]
    fn mse_scale() {
        let a = Image::filled(4, 4, [0, 0, 0]);
        let b = Image::filled(4, 4, [255, 255, 255]);
        assert_eq!(mse_255(&a, &b).unwrap(), 65025.0);
        assert_eq!(mse_255(&a, &a).unwrap(), 0.0);
        assert!(mse_255(&a, &Image::new(3, 4)).is_err());
    }

    #[test]
    fn too_small_for_window() {
        let a = Image::new(8, 8);
        assert!(matches!(ssim(&a, &a), Err(MetricsError::Shape(_))));
    }
}

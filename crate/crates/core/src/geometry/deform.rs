use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

use super::HullMaskParams;

/// Control-point lattice of the elastic displacement field.
const CONTROL_GRID: usize = 4;

fn sample_bilinear(data: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bottom = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let weights: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total) as f32).collect()
}

/// Separable Gaussian blur of an `[H, W]` map with clamp-to-edge borders.
/// `sigma == 0` returns the input unchanged.
pub fn gaussian_blur(map: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    if sigma <= 0.0 {
        return map.clone();
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = map.data();
    let mut tmp = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0f32;
            for (j, &kv) in k.iter().enumerate() {
                let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                s += kv * src[y * w + xx];
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0f32;
            for (j, &kv) in k.iter().enumerate() {
                let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                s += kv * tmp[yy * w + x];
            }
            out[y * w + x] = s;
        }
    }
    Tensor::new(vec![h, w], out).expect("same shape")
}

/// Seeded elastic warp (per-axis offsets up to `(deform_kernel - 1) / 2`
/// pixels, smoothly interpolated from a coarse lattice) followed by a
/// Gaussian blur with `blur_sigma`. Output is clamped to `[0, 1]`.
pub fn deform_mask(mask: &Tensor<f32>, params: &HullMaskParams, seed: u64) -> Tensor<f32> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let max_offset = (params.deform_kernel.saturating_sub(1) / 2) as f64;
    let warped = if max_offset > 0.0 && h > 1 && w > 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = CONTROL_GRID + 1;
        let ctrl: Vec<(f64, f64)> = (0..n * n)
            .map(|_| (rng.random_range(-max_offset..=max_offset), rng.random_range(-max_offset..=max_offset)))
            .collect();
        let src = mask.data();
        let mut out = vec![0f32; h * w];
        for y in 0..h {
            let gy = y as f64 / (h - 1) as f64 * CONTROL_GRID as f64;
            let iy = (gy.floor() as usize).min(CONTROL_GRID - 1);
            let fy = gy - iy as f64;
            for x in 0..w {
                let gx = x as f64 / (w - 1) as f64 * CONTROL_GRID as f64;
                let ix = (gx.floor() as usize).min(CONTROL_GRID - 1);
                let fx = gx - ix as f64;
                let at = |r: usize, c: usize| ctrl[r * n + c];
                let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
                let top = lerp(at(iy, ix), at(iy, ix + 1), fx);
                let bottom = lerp(at(iy + 1, ix), at(iy + 1, ix + 1), fx);
                let (dx, dy) = lerp(top, bottom, fy);
                out[y * w + x] = sample_bilinear(src, h, w, x as f64 + dx, y as f64 + dy);
            }
        }
        Tensor::new(vec![h, w], out).expect("same shape")
    } else {
        mask.clone()
    };
    gaussian_blur(&warped, params.blur_sigma).map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HullMode;

    fn step_mask(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[h, w], |i| if i % w >= w / 2 { 1.0 } else { 0.0 })
    }

    fn p(k: usize, s: f64) -> HullMaskParams {
        HullMaskParams { hull_mode: HullMode::FullHull, deform_kernel: k, blur_sigma: s }
    }

    #[test]
    fn identity_settings_leave_mask() {
        let m = step_mask(12, 12);
        assert_eq!(deform_mask(&m, &p(1, 0.0), 7), m);
    }

    #[test]
    fn zero_mask_stays_zero() {
        let m = Tensor::zeros(&[10, 10]);
        assert!(deform_mask(&m, &p(5, 1.5), 3).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn blur_softens_the_edge() {
        let m = step_mask(16, 16);
        let out = deform_mask(&m, &p(1, 2.0), 0);
        let row = 8;
        let band: Vec<f32> = (6..10).map(|c| out.get(&[row, c])).collect();
        assert!(band.iter().all(|&v| v > 0.0 && v < 1.0), "{band:?}");
        let ratio = out.sum() / m.sum();
        assert!((0.5..=2.0).contains(&ratio));
    }

    #[test]
    fn deformation_is_seeded() {
        let m = step_mask(16, 16);
        let a = deform_mask(&m, &p(7, 0.0), 11);
        assert_eq!(a, deform_mask(&m, &p(7, 0.0), 11));
        assert_ne!(a, deform_mask(&m, &p(7, 0.0), 12));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

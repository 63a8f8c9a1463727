use crate::numerics::Tensor;

use super::{GeometryError, HullMaskParams, HullMode, Point};

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Landmarks spanning the hull for `mode`.
pub fn select_hull_points(points: &[Point], mode: HullMode) -> Vec<Point> {
    match mode {
        HullMode::FullHull => points.to_vec(),
        HullMode::LowerHalf => {
            let mean_y = points.iter().map(|p| p.y).sum::<f64>() / points.len().max(1) as f64;
            points.iter().copied().filter(|p| p.y >= mean_y).collect()
        }
        HullMode::JawRegion => {
            let (lo, hi) = points
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.y), hi.max(p.y)));
            let cut = lo + (hi - lo) / 3.0;
            points.iter().copied().filter(|p| p.y >= cut).collect()
        }
    }
}

/// Monotone-chain convex hull with collinear points dropped, counter-clockwise
/// in a y-up frame (positive signed area under [`cross`]).
pub fn convex_hull(points: &[Point]) -> Result<Vec<Point>, GeometryError> {
    let degenerate = GeometryError::DegenerateHull { count: points.len() };
    if points.len() < 3 {
        return Err(degenerate);
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        return Err(degenerate);
    }
    Ok(lower)
}

/// Strict interior test against a hull from [`convex_hull`].
pub fn point_in_convex_polygon(hull: &[Point], p: Point) -> bool {
    (0..hull.len()).all(|i| cross(hull[i], hull[(i + 1) % hull.len()], p) > 0.0)
}

/// Binary `[H, W]` mask set where the pixel center lies strictly inside the
/// hull of the points selected by `params.hull_mode`.
pub fn rasterize_hull(points: &[Point], height: usize, width: usize, params: &HullMaskParams) -> Result<Tensor<f32>, GeometryError> {
    let selected = select_hull_points(points, params.hull_mode);
    let hull = convex_hull(&selected).map_err(|_| GeometryError::DegenerateHull { count: selected.len() })?;
    let mut mask = Tensor::zeros(&[height, width]);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &hull {
        x0 = x0.min(p.x);
        x1 = x1.max(p.x);
        y0 = y0.min(p.y);
        y1 = y1.max(p.y);
    }
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    let (c0, c1) = (clamp(x0.floor(), width), clamp(x1.ceil() + 1.0, width));
    let (r0, r1) = (clamp(y0.floor(), height), clamp(y1.ceil() + 1.0, height));
    let data = mask.data_mut();
    for row in r0..r1 {
        for col in c0..c1 {
            if point_in_convex_polygon(&hull, Point::new(col as f64 + 0.5, row as f64 + 0.5)) {
                data[row * width + col] = 1.0;
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(mode: HullMode) -> HullMaskParams {
        HullMaskParams { hull_mode: mode, deform_kernel: 1, blur_sigma: 0.0 }
    }

    #[test]
    fn small_triangle_covers_one_pixel_center() {
        let pts = [Point::new(4.0, 4.0), Point::new(7.0, 4.2), Point::new(4.3, 7.0)];
        let m = rasterize_hull(&pts, 10, 10, &params(HullMode::FullHull)).unwrap();
        assert_eq!(m.get(&[4, 4]), 1.0);
        for &(r, c) in &[(0, 0), (0, 9), (9, 0), (9, 9)] {
            assert_eq!(m.get(&[r, c]), 0.0);
        }
        // Every pixel agrees with an independent half-plane test.
        for r in 0..10 {
            for c in 0..10 {
                let (px, py) = (c as f64 + 0.5, r as f64 + 0.5);
                let inside = [(0, 1), (1, 2), (2, 0)].iter().all(|&(i, j)| {
                    let (a, b) = (pts[i], pts[j]);
                    let s = (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x);
                    s > 0.0
                }) || [(0, 1), (1, 2), (2, 0)].iter().all(|&(i, j)| {
                    let (a, b) = (pts[i], pts[j]);
                    (b.x - a.x) * (py - a.y) - (b.y - a.y) * (px - a.x) < 0.0
                });
                assert_eq!(m.get(&[r, c]) == 1.0, inside, "pixel ({r},{c})");
            }
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pts = [Point::new(0.0, 0.0), Point::new(1.0, 1.0), Point::new(2.0, 2.0), Point::new(3.0, 3.0)];
        assert!(matches!(
            rasterize_hull(&pts, 8, 8, &params(HullMode::FullHull)),
            Err(GeometryError::DegenerateHull { .. })
        ));
    }

    #[test]
    fn hull_drops_interior_points() {
        let pts = [
            Point::new(0.0, 0.0),
            Point::new(4.0, 0.0),
            Point::new(4.0, 4.0),
            Point::new(0.0, 4.0),
            Point::new(2.0, 2.0),
            Point::new(2.0, 0.0),
        ];
        assert_eq!(convex_hull(&pts).unwrap().len(), 4);
    }

    #[test]
    fn lower_half_mask_is_subset_of_full() {
        let pts: Vec<Point> = (0..12)
            .map(|k| {
                let a = k as f64 * std::f64::consts::TAU / 12.0;
                Point::new(16.0 + 8.0 * a.cos(), 16.0 + 10.0 * a.sin())
            })
            .collect();
        let full = rasterize_hull(&pts, 32, 32, &params(HullMode::FullHull)).unwrap();
        for mode in [HullMode::LowerHalf, HullMode::JawRegion] {
            let part = rasterize_hull(&pts, 32, 32, &params(mode)).unwrap();
            assert!(part.sum() > 0.0 && part.sum() < full.sum());
            assert!(part.data().iter().zip(full.data()).all(|(&a, &b)| a <= b));
        }
    }
}

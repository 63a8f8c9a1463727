use super::{GeometryError, InterpolationConfig, Point};

/// `||stack(curr - prev)||_2 / n` over the whole frame.
pub fn frame_distance(prev: &[Point], curr: &[Point]) -> Result<f64, GeometryError> {
    if prev.len() != curr.len() {
        return Err(GeometryError::ShapeMismatch { prev: prev.len(), curr: curr.len() });
    }
    if prev.is_empty() {
        return Ok(0.0);
    }
    let sq: f64 = prev
        .iter()
        .zip(curr)
        .map(|(p, c)| {
            let (dx, dy) = (c.x - p.x, c.y - p.y);
            dx * dx + dy * dy
        })
        .sum();
    Ok(sq.sqrt() / prev.len() as f64)
}

/// `round(d / dbar)` with ties away from zero, never below 1.
pub fn interpolation_ratio(d: f64, dbar: f64) -> f64 {
    (d / dbar).round().max(1.0)
}

/// Pulls `curr` toward `prev` when the frame moved more than `tau`:
/// `prev + (curr - prev) / r` with one ratio `r` shared by all landmarks.
pub fn interpolate_frame(prev: &[Point], curr: &[Point], cfg: &InterpolationConfig) -> Result<Vec<Point>, GeometryError> {
    cfg.validate()?;
    let d = frame_distance(prev, curr)?;
    if d <= cfg.tau {
        return Ok(curr.to_vec());
    }
    let r = interpolation_ratio(d, cfg.dbar);
    Ok(prev
        .iter()
        .zip(curr)
        .map(|(p, c)| Point::new(p.x + (c.x - p.x) / r, p.y + (c.y - p.y) / r))
        .collect())
}

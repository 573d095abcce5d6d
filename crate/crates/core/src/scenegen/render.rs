//! Rasterization helpers: value-noise background and analytic shape tests.

use rand::Rng;

use super::Category;

const SQUARE_HALF_SIDE: f64 = 0.886;
const TRIANGLE_CIRCUMRADIUS: f64 = 1.25;

/// Mid-grey background with smooth per-channel value noise: a coarse random
/// lattice upsampled bilinearly, amplitude +-0.06.
pub(super) fn background(rng: &mut impl Rng, size: usize) -> Vec<f32> {
    const CELLS: usize = 4;
    let mut lattice = [[0.0f32; 3]; (CELLS + 1) * (CELLS + 1)];
    for node in lattice.iter_mut() {
        for ch in node.iter_mut() {
            *ch = rng.gen_range(-0.06..0.06);
        }
    }
    let mut out = vec![0.0f32; size * size * 3];
    let cell = size as f32 / CELLS as f32;
    for y in 0..size {
        let fy = y as f32 / cell;
        let gy = (fy as usize).min(CELLS - 1);
        let ty = fy - gy as f32;
        for x in 0..size {
            let fx = x as f32 / cell;
            let gx = (fx as usize).min(CELLS - 1);
            let tx = fx - gx as f32;
            let idx = |r: usize, c: usize| r * (CELLS + 1) + c;
            for c in 0..3 {
                let v00 = lattice[idx(gy, gx)][c];
                let v01 = lattice[idx(gy, gx + 1)][c];
                let v10 = lattice[idx(gy + 1, gx)][c];
                let v11 = lattice[idx(gy + 1, gx + 1)][c];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                out[(y * size + x) * 3 + c] = 0.5 + top + (bot - top) * ty;
            }
        }
    }
    out
}

/// Half-extent of the shape's bounding square, used to keep placements fully
/// inside the frame.
pub(super) fn extent(category: Category, r: f64) -> f64 {
    match category {
        Category::Circle => r,
        Category::Square => SQUARE_HALF_SIDE * r,
        Category::Triangle => TRIANGLE_CIRCUMRADIUS * r,
    }
}

fn contains(category: Category, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
    let (dx, dy) = (px - cx, py - cy);
    match category {
        Category::Circle => dx * dx + dy * dy <= r * r,
        Category::Square => {
            let h = SQUARE_HALF_SIDE * r;
            dx.abs() <= h && dy.abs() <= h
        }
        Category::Triangle => {
            // Equilateral, apex up (-y in image coordinates), circumradius R.
            let rr = TRIANGLE_CIRCUMRADIUS * r;
            let ax = 0.0;
            let ay = -rr;
            let bx = -rr * 3.0f64.sqrt() / 2.0;
            let by = rr / 2.0;
            let cx2 = rr * 3.0f64.sqrt() / 2.0;
            let cy2 = rr / 2.0;
            let cross = |ox: f64, oy: f64, ex: f64, ey: f64| {
                (ex - ox) * (dy - oy) - (ey - oy) * (dx - ox)
            };
            let s1 = cross(ax, ay, bx, by);
            let s2 = cross(bx, by, cx2, cy2);
            let s3 = cross(cx2, cy2, ax, ay);
            (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
        }
    }
}

/// Rasterize by pixel-center inclusion over the shape's bounding window.
pub(super) fn rasterize(category: Category, cx: f64, cy: f64, r: f64, size: usize) -> Vec<bool> {
    let mut bits = vec![false; size * size];
    let ext = extent(category, r);
    let y0 = ((cy - ext).floor().max(0.0)) as usize;
    let y1 = ((cy + ext).ceil() as usize).min(size.saturating_sub(1));
    let x0 = ((cx - ext).floor().max(0.0)) as usize;
    let x1 = ((cx + ext).ceil() as usize).min(size.saturating_sub(1));
    for y in y0..=y1 {
        for x in x0..=x1 {
            if contains(category, cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                bits[y * size + x] = true;
            }
        }
    }
    bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn background_stays_near_mid_grey() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bg = background(&mut rng, 32);
        assert_eq!(bg.len(), 32 * 32 * 3);
        for v in &bg {
            assert!((0.38..=0.62).contains(v), "background value {v} out of band");
        }
    }

    #[test]
    fn shape_areas_match_analytic_formulas() {
        // Pixel-center counts have subpixel-phase bias (worst for the
        // axis-aligned square), but their mean over uniform random centers
        // equals the analytic area exactly, so test the mean tightly and each
        // instance loosely.
        let size = 128;
        let r = 20.0;
        let cases = [
            (Category::Circle, std::f64::consts::PI * r * r),
            (Category::Square, (2.0 * SQUARE_HALF_SIDE * r).powi(2)),
            (
                Category::Triangle,
                3.0 * 3.0f64.sqrt() / 4.0 * (TRIANGLE_CIRCUMRADIUS * r).powi(2),
            ),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (cat, analytic) in cases {
            let trials = 64;
            let mut total = 0.0;
            for _ in 0..trials {
                let cx = 64.0 + rng.gen_range(-0.5..0.5);
                let cy = 64.0 + rng.gen_range(-0.5..0.5);
                let bits = rasterize(cat, cx, cy, r, size);
                let counted = bits.iter().filter(|b| **b).count() as f64;
                let rel = (counted - analytic).abs() / analytic;
                assert!(rel < 0.06, "{cat:?}: {counted} vs {analytic} (rel {rel:.4})");
                total += counted;
            }
            let mean = total / trials as f64;
            let rel = (mean - analytic).abs() / analytic;
            assert!(rel < 0.01, "{cat:?}: mean {mean} vs {analytic} (rel {rel:.4})");
        }
    }

    #[test]
    fn shapes_stay_within_extent_window() {
        let size = 64;
        for cat in Category::ALL {
            let (cx, cy, r) = (30.3, 33.7, 9.0);
            let ext = extent(cat, r);
            let bits = rasterize(cat, cx, cy, r, size);
            for y in 0..size {
                for x in 0..size {
                    if bits[y * size + x] {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        assert!((px - cx).abs() <= ext + 0.5);
                        assert!((py - cy).abs() <= ext + 0.5);
                    }
                }
            }
        }
    }
}

//! Bounded Voronoi cells by half-plane clipping of the arena square.

pub type Point = [f64; 2];

/// Cell of `site` among `others`, clipped to `[-half, half]^2`.
/// Returns the polygon vertices (possibly empty when degenerate).
pub fn bounded_cell(site: Point, others: &[Point], half: f64) -> Vec<Point> {
    let mut poly = vec![[-half, -half], [half, -half], [half, half], [-half, half]];
    for o in others {
        let n = [o[0] - site[0], o[1] - site[1]];
        if n[0] == 0.0 && n[1] == 0.0 {
            continue;
        }
        let m = [0.5 * (o[0] + site[0]), 0.5 * (o[1] + site[1])];
        // keep {x : (x - m)·n <= 0}
        poly = clip(&poly, |p| (p[0] - m[0]) * n[0] + (p[1] - m[1]) * n[1]);
        if poly.is_empty() {
            break;
        }
    }
    poly
}

fn clip(poly: &[Point], side: impl Fn(Point) -> f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (da, db) = (side(a), side(b));
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Area-weighted centroid; `None` for a polygon of (near) zero area.
pub fn centroid(poly: &[Point]) -> Option<Point> {
    if poly.len() < 3 {
        return None;
    }
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        let cross = p[0] * q[1] - q[0] * p[1];
        a2 += cross;
        cx += (p[0] + q[0]) * cross;
        cy += (p[1] + q[1]) * cross;
    }
    if a2.abs() < 1e-14 {
        return None;
    }
    Some([cx / (3.0 * a2), cy / (3.0 * a2)])
}

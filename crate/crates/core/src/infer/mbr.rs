//! Convex hull and minimum-area bounding rectangle by rotating calipers.

use super::trace::{signed_area, PolygonFeature};

type P = (f64, f64);

fn cross(o: P, a: P, b: P) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Andrew's monotone chain. Returns the hull with positive orientation and
/// without collinear points; fewer than three points means a degenerate set.
pub fn convex_hull(points: &[P]) -> Vec<P> {
    let mut pts: Vec<P> = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<P> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<P> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    /// Corners with positive orientation.
    pub corners: [P; 4],
    pub area: f64,
    /// Angle of the first side against the x axis, radians.
    pub angle: f64,
    /// Input points were collinear; the rectangle has zero width.
    pub degenerate: bool,
}

fn rect_from(origin: P, u: P, lo: f64, hi: f64, wmin: f64, wmax: f64) -> [P; 4] {
    let v = (-u.1, u.0);
    let at = |s: f64, t: f64| (origin.0 + s * u.0 + t * v.0, origin.1 + s * u.1 + t * v.1);
    [at(lo, wmin), at(hi, wmin), at(hi, wmax), at(lo, wmax)]
}

/// Smallest-area rectangle of any orientation containing `points`.
///
/// One side of the optimum is collinear with a hull edge, so every edge is
/// tried; three calipers (forward extreme, far side, backward extreme) only
/// ever advance, giving linear time after the hull.
pub fn min_bounding_rectangle(points: &[P]) -> Option<Rect> {
    let hull = convex_hull(points);
    match hull.len() {
        0 => return None,
        1 | 2 => {
            let a = hull[0];
            let b = *hull.last().unwrap();
            let d = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
            let u = if d > 0.0 { ((b.0 - a.0) / d, (b.1 - a.1) / d) } else { (1.0, 0.0) };
            return Some(Rect {
                corners: rect_from(a, u, 0.0, d, 0.0, 0.0),
                area: 0.0,
                angle: u.1.atan2(u.0),
                degenerate: true,
            });
        }
        _ => {}
    }
    let n = hull.len();
    let dot = |a: P, b: P| a.0 * b.0 + a.1 * b.1;
    let sub = |a: P, b: P| (a.0 - b.0, a.1 - b.1);
    let mut best: Option<Rect> = None;
    let (mut fwd, mut far, mut back) = (1usize, 1usize, 1usize);
    for i in 0..n {
        let p = hull[i];
        let e = sub(hull[(i + 1) % n], p);
        let len = dot(e, e).sqrt();
        let u = (e.0 / len, e.1 / len);
        // hull lies to the left of every edge
        let v = (-u.1, u.0);
        let along = |k: usize| dot(sub(hull[k % n], p), u);
        let across = |k: usize| dot(sub(hull[k % n], p), v);
        while along(fwd + 1) > along(fwd) {
            fwd = (fwd + 1) % n;
        }
        if i == 0 {
            far = fwd;
        }
        while across(far + 1) > across(far) {
            far = (far + 1) % n;
        }
        if i == 0 {
            back = far;
        }
        while along(back + 1) < along(back) {
            back = (back + 1) % n;
        }
        let hi = dot(sub(hull[fwd], p), u);
        let lo = dot(sub(hull[back], p), u).min(0.0);
        let width = dot(sub(hull[far], p), v);
        let area = (hi - lo) * width;
        if best.as_ref().is_none_or(|b| area < b.area) {
            best = Some(Rect {
                corners: rect_from(p, u, lo, hi, 0.0, width),
                area,
                angle: u.1.atan2(u.0),
                degenerate: false,
            });
        }
    }
    best
}

/// Replaces a traced polygon by its minimum bounding rectangle.
pub fn rectangularize(feature: &PolygonFeature) -> Option<PolygonFeature> {
    let r = min_bounding_rectangle(&feature.exterior)?;
    let mut ring: Vec<P> = r.corners.to_vec();
    ring.push(ring[0]);
    Some(PolygonFeature {
        area: signed_area(&ring).abs(),
        exterior: ring,
        component: feature.component,
        degenerate: r.degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bounding-box area minimized over rotations in 0.1 degree steps.
    fn sweep_area(points: &[P]) -> f64 {
        let mut best = f64::INFINITY;
        for step in 0..1800 {
            let a = (step as f64 * 0.1).to_radians();
            let (s, c) = a.sin_cos();
            let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for &(x, y) in points {
                let (rx, ry) = (c * x + s * y, -s * x + c * y);
                x0 = x0.min(rx);
                x1 = x1.max(rx);
                y0 = y0.min(ry);
                y1 = y1.max(ry);
            }
            best = best.min((x1 - x0) * (y1 - y0));
        }
        best
    }

    fn contains_all(r: &Rect, points: &[P]) -> bool {
        let c = r.corners;
        points.iter().all(|&p| (0..4).all(|k| cross(c[k], c[(k + 1) % 4], p) >= -1e-9))
    }

    #[test]
    fn axis_aligned_rectangle_is_itself() {
        let pts = [(1.0, 2.0), (5.0, 2.0), (5.0, 4.0), (1.0, 4.0)];
        let r = min_bounding_rectangle(&pts).unwrap();
        assert!((r.area - 8.0).abs() < 1e-12);
        let mut got: Vec<(i64, i64)> = r.corners.iter().map(|p| (p.0.round() as i64, p.1.round() as i64)).collect();
        got.sort();
        assert_eq!(got, vec![(1, 2), (1, 4), (5, 2), (5, 4)]);
        for c in r.corners {
            assert!((c.0 - c.0.round()).abs() < 1e-12 && (c.1 - c.1.round()).abs() < 1e-12);
        }
    }

    #[test]
    fn diamond_beats_its_bounding_box() {
        let pts = [(1.0, 0.0), (2.0, 1.0), (1.0, 2.0), (0.0, 1.0)];
        let r = min_bounding_rectangle(&pts).unwrap();
        assert!((r.area - 2.0).abs() < 1e-12);
        assert!((r.area - sweep_area(&pts)).abs() < 1e-6);
        assert!(contains_all(&r, &pts));
    }

    #[test]
    fn triangle_matches_sweep() {
        let pts = [(0.0, 0.0), (4.0, 0.0), (0.0, 3.0)];
        let r = min_bounding_rectangle(&pts).unwrap();
        assert!((r.area - sweep_area(&pts)).abs() < 1e-6, "{} vs {}", r.area, sweep_area(&pts));
        assert!(contains_all(&r, &pts));
    }

    #[test]
    fn collinear_points_are_flagged() {
        let r = min_bounding_rectangle(&[(0.0, 0.0), (1.0, 1.0), (3.0, 3.0)]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.area, 0.0);
        assert!(min_bounding_rectangle(&[]).is_none());
    }

    #[test]
    fn hull_drops_interior_and_collinear_points() {
        let h = convex_hull(&[(0.0, 0.0), (2.0, 0.0), (1.0, 0.0), (2.0, 2.0), (0.0, 2.0), (1.0, 1.0)]);
        assert_eq!(h.len(), 4);
        assert!(signed_area(&[h.clone(), vec![h[0]]].concat()) > 0.0);
    }

    proptest! {
        #[test]
        fn calipers_match_the_angle_sweep(pts in prop::collection::vec((-50i32..50, -50i32..50), 3..25)) {
            let pts: Vec<P> = pts.into_iter().map(|(x, y)| (x as f64, y as f64)).collect();
            let r = min_bounding_rectangle(&pts).unwrap();
            prop_assert!(contains_all(&r, &pts));
            if !r.degenerate {
                // the sweep can only overestimate the true optimum
                prop_assert!(r.area <= sweep_area(&pts) + 1e-6);
                let xs = pts.iter().map(|p| p.0);
                let ys = pts.iter().map(|p| p.1);
                let aabb = (xs.clone().fold(f64::NEG_INFINITY, f64::max) - xs.fold(f64::INFINITY, f64::min))
                    * (ys.clone().fold(f64::NEG_INFINITY, f64::max) - ys.fold(f64::INFINITY, f64::min));
                prop_assert!(r.area <= aabb + 1e-9);
                // brute force over hull edges
                let hull = convex_hull(&pts);
                let mut brute = f64::INFINITY;
                for i in 0..hull.len() {
                    let a = hull[i];
                    let b = hull[(i + 1) % hull.len()];
                    let l = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
                    let u = ((b.0 - a.0) / l, (b.1 - a.1) / l);
                    let proj: Vec<(f64, f64)> = hull.iter().map(|p| (p.0 * u.0 + p.1 * u.1, -p.0 * u.1 + p.1 * u.0)).collect();
                    let w = proj.iter().map(|q| q.0).fold(f64::NEG_INFINITY, f64::max) - proj.iter().map(|q| q.0).fold(f64::INFINITY, f64::min);
                    let h = proj.iter().map(|q| q.1).fold(f64::NEG_INFINITY, f64::max) - proj.iter().map(|q| q.1).fold(f64::INFINITY, f64::min);
                    brute = brute.min(w * h);
                }
                prop_assert!((r.area - brute).abs() < 1e-6 * brute.max(1.0), "{} vs {}", r.area, brute);
            }
        }
    }
}

//! Pixel-edge boundary tracing of mask components.
//!
//! Pixel `(x, y)` covers `[x, x+1] × [y, y+1]`, so traced vertices are
//! integer corner coordinates. Exterior rings have a positive shoelace area
//! in pixel coordinates and are closed (first vertex repeated).

use crate::metrics::connected_components;
use crate::raster::labels::Ring;
use crate::raster::Mask;
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct PolygonFeature {
    pub exterior: Ring,
    pub area: f64,
    /// Connected-component label the ring was traced from.
    pub component: u32,
    /// Set by the rectangle fit when the input was collinear.
    pub degenerate: bool,
}

/// Shoelace area of a closed ring, positive for the traced orientation.
pub fn signed_area(ring: &[(f64, f64)]) -> f64 {
    ring.windows(2).map(|e| e[0].0 * e[1].1 - e[1].0 * e[0].1).sum::<f64>() / 2.0
}

/// Fills background regions that are not 8-connected to the image border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (w, h) = (mask.width, mask.height);
    let mut outside = vec![false; w * h];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h) && !mask.get(x, y) {
                outside[y * w + x] = true;
                stack.push((x, y));
            }
        }
    }
    while let Some((x, y)) = stack.pop() {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let i = ny as usize * w + nx as usize;
                if !outside[i] && mask.data[i] == 0 {
                    outside[i] = true;
                    stack.push((nx as usize, ny as usize));
                }
            }
        }
    }
    Mask {
        width: w,
        height: h,
        data: outside.iter().map(|&o| (!o) as u8).collect(),
    }
}

type Pt = (i64, i64);

/// Directed boundary edge plus the pixel it belongs to.
#[derive(Clone, Copy)]
struct Edge {
    to: Pt,
    pixel: Pt,
}

/// Outer ring of a hole-free pixel set given by `inside`. `start` must be
/// the first set pixel in raster order.
fn trace_outer(inside: &dyn Fn(i64, i64) -> bool, pixels: &[Pt], start: Pt) -> Vec<Pt> {
    let mut out: HashMap<Pt, Vec<Edge>> = HashMap::new();
    let mut push = |from: Pt, to: Pt, pixel: Pt| out.entry(from).or_default().push(Edge { to, pixel });
    for &(x, y) in pixels {
        if !inside(x, y - 1) {
            push((x, y), (x + 1, y), (x, y));
        }
        if !inside(x + 1, y) {
            push((x + 1, y), (x + 1, y + 1), (x, y));
        }
        if !inside(x, y + 1) {
            push((x + 1, y + 1), (x, y + 1), (x, y));
        }
        if !inside(x - 1, y) {
            push((x, y + 1), (x, y), (x, y));
        }
    }
    let mut ring = vec![start];
    let mut cur = start;
    let mut pixel = start;
    loop {
        let list = out.get_mut(&cur).expect("boundary edges form closed loops");
        // at a corner shared by two diagonal pixels, stay with the current
        // pixel so the diagonal stays unconnected
        let k = list.iter().position(|e| e.pixel == pixel).unwrap_or(0);
        let e = list.swap_remove(k);
        cur = e.to;
        pixel = e.pixel;
        if cur == start {
            break;
        }
        ring.push(cur);
    }
    ring
}

/// Drops vertices whose incoming and outgoing edges are parallel.
fn merge_collinear(ring: &[Pt]) -> Vec<Pt> {
    let n = ring.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let a = ring[(i + n - 1) % n];
        let b = ring[i];
        let c = ring[(i + 1) % n];
        let cross = (b.0 - a.0) * (c.1 - b.1) - (b.1 - a.1) * (c.0 - b.0);
        if cross != 0 {
            out.push(b);
        }
    }
    out
}

/// One exterior ring per 4-connected component, holes discarded, in the
/// component order of [`connected_components`].
pub fn trace_polygons(mask: &Mask) -> Vec<PolygonFeature> {
    let comps = connected_components(mask);
    let (w, h) = (mask.width, mask.height);
    let mut members: Vec<Vec<Pt>> = vec![Vec::new(); comps.count + 1];
    for y in 0..h {
        for x in 0..w {
            let l = comps.label(x, y) as usize;
            if l != 0 {
                members[l].push((x as i64, y as i64));
            }
        }
    }
    let mut features = Vec::with_capacity(comps.count);
    for (label, px) in members.iter().enumerate().skip(1) {
        // local window with a one-pixel margin
        let x0 = px.iter().map(|p| p.0).min().unwrap() - 1;
        let x1 = px.iter().map(|p| p.0).max().unwrap() + 1;
        let y0 = px.iter().map(|p| p.1).min().unwrap() - 1;
        let y1 = px.iter().map(|p| p.1).max().unwrap() + 1;
        let (lw, lh) = ((x1 - x0 + 1) as usize, (y1 - y0 + 1) as usize);
        let mut local = Mask::zeros(lw, lh);
        for &(x, y) in px {
            local.set((x - x0) as usize, (y - y0) as usize, true);
        }
        let filled = fill_holes(&local);
        let inside = |x: i64, y: i64| {
            let (lx, ly) = (x - x0, y - y0);
            lx >= 0 && ly >= 0 && (lx as usize) < lw && (ly as usize) < lh && filled.get(lx as usize, ly as usize)
        };
        let filled_px: Vec<Pt> = (0..lh)
            .flat_map(|ly| (0..lw).map(move |lx| (lx, ly)))
            .filter(|&(lx, ly)| filled.get(lx, ly))
            .map(|(lx, ly)| (lx as i64 + x0, ly as i64 + y0))
            .collect();
        let start = filled_px[0];
        let ring = merge_collinear(&trace_outer(&inside, &filled_px, start));
        let mut exterior: Ring = ring.iter().map(|&(x, y)| (x as f64, y as f64)).collect();
        exterior.push(exterior[0]);
        let area = signed_area(&exterior);
        features.push(PolygonFeature {
            exterior,
            area,
            component: label as u32,
            degenerate: false,
        });
    }
    features
}

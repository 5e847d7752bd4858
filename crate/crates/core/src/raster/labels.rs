//! Polygon labels in GeoJSON and their rasterization.

use super::{Affine, Mask};
use crate::error::{Error, Result};
use geojson::{Feature, FeatureCollection, GeoJson, Geometry, JsonObject, Value};
use std::path::Path;

/// Foreign member naming the coordinate space of a feature collection.
pub const COORDINATE_SPACE_KEY: &str = "coordinate_space";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordinateSpace {
    /// Pixel coordinates, origin at the top-left image corner.
    Pixel,
    /// World coordinates mapped through the raster's affine transform.
    World,
}

impl CoordinateSpace {
    fn name(self) -> &'static str {
        match self {
            CoordinateSpace::Pixel => "pixel",
            CoordinateSpace::World => "world",
        }
    }
}

pub type Ring = Vec<(f64, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct LabelPolygon {
    /// Closed ring: first vertex repeated at the end.
    pub exterior: Ring,
    pub holes: Vec<Ring>,
    pub self_intersecting: bool,
}

impl LabelPolygon {
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Self {
        let self_intersecting =
            ring_self_intersects(&exterior) || holes.iter().any(ring_self_intersects);
        LabelPolygon {
            exterior,
            holes,
            self_intersecting,
        }
    }

    /// Axis-aligned rectangle `[x0, x1] × [y0, y1]` in pixel coordinates.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        LabelPolygon::new(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0)], Vec::new())
    }

    pub fn rings(&self) -> impl Iterator<Item = &Ring> {
        std::iter::once(&self.exterior).chain(&self.holes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub polygons: Vec<LabelPolygon>,
    /// Where the coordinates came from (`pixel` or `world`).
    pub source_space: String,
}

impl Default for LabelSet {
    fn default() -> Self {
        LabelSet {
            polygons: Vec::new(),
            source_space: CoordinateSpace::Pixel.name().into(),
        }
    }
}

fn ring_from_positions(positions: &[Vec<f64>], feature: usize, to_pixel: &Affine) -> Result<Ring> {
    let bad = |detail: String| Error::invalid("label ring", format!("feature {feature}: {detail}"));
    let mut ring = Vec::with_capacity(positions.len());
    for p in positions {
        if p.len() < 2 {
            return Err(bad("position with fewer than two coordinates".into()));
        }
        ring.push(to_pixel.apply(p[0], p[1]));
    }
    if positions.len() < 4 || positions.first() != positions.last() {
        return Err(bad("ring is not closed".into()));
    }
    let mut distinct: Vec<(f64, f64)> = ring[..ring.len() - 1].to_vec();
    distinct.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(bad(format!("ring has {} distinct vertices, need 3", distinct.len())));
    }
    // the affine may perturb the closing vertex by rounding; keep it exact
    let first = ring[0];
    *ring.last_mut().unwrap() = first;
    Ok(ring)
}

fn polygon_from(rings: &[Vec<Vec<f64>>], feature: usize, to_pixel: &Affine) -> Result<LabelPolygon> {
    let Some((ext, holes)) = rings.split_first() else {
        return Err(Error::invalid("label polygon", format!("feature {feature}: no rings")));
    };
    let exterior = ring_from_positions(ext, feature, to_pixel)?;
    let holes = holes
        .iter()
        .map(|h| ring_from_positions(h, feature, to_pixel))
        .collect::<Result<_>>()?;
    Ok(LabelPolygon::new(exterior, holes))
}

/// Parses a FeatureCollection of Polygon/MultiPolygon features. World
/// coordinates go through the inverse of `transform`; collections tagged
/// with a pixel coordinate space are taken as is.
pub fn parse_labels(text: &str, transform: &Affine) -> Result<LabelSet> {
    let gj: GeoJson = text
        .parse()
        .map_err(|e: geojson::Error| Error::invalid("GeoJSON", e.to_string()))?;
    let fc = match gj {
        GeoJson::FeatureCollection(fc) => fc,
        _ => return Err(Error::invalid("GeoJSON", "expected a FeatureCollection")),
    };
    let space = fc
        .foreign_members
        .as_ref()
        .and_then(|m| m.get(COORDINATE_SPACE_KEY))
        .and_then(|v| v.as_str())
        .unwrap_or("world")
        .to_string();
    let to_pixel = match space.as_str() {
        "pixel" => Affine::IDENTITY,
        "world" => transform.inverse()?,
        other => return Err(Error::invalid("GeoJSON", format!("unknown coordinate space `{other}`"))),
    };
    let mut polygons = Vec::new();
    for (i, f) in fc.features.iter().enumerate() {
        let Some(g) = &f.geometry else { continue };
        match &g.value {
            Value::Polygon(rings) => polygons.push(polygon_from(rings, i, &to_pixel)?),
            Value::MultiPolygon(polys) => {
                for rings in polys {
                    polygons.push(polygon_from(rings, i, &to_pixel)?);
                }
            }
            _ => {
                return Err(Error::invalid(
                    "label geometry",
                    format!("feature {i}: only Polygon and MultiPolygon are supported"),
                ))
            }
        }
    }
    Ok(LabelSet {
        polygons,
        source_space: space,
    })
}

pub fn read_labels(path: impl AsRef<Path>, transform: &Affine) -> Result<LabelSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, transform)
}

/// Builds a FeatureCollection from closed pixel rings. With a transform the
/// coordinates are written in world space, otherwise in pixel space.
pub fn feature_collection<'a>(
    items: impl IntoIterator<Item = (Vec<&'a Ring>, JsonObject)>,
    transform: Option<&Affine>,
) -> FeatureCollection {
    let space = if transform.is_some() { CoordinateSpace::World } else { CoordinateSpace::Pixel };
    let map = |&(x, y): &(f64, f64)| -> Vec<f64> {
        let (wx, wy) = transform.map_or((x, y), |t| t.apply(x, y));
        vec![wx, wy]
    };
    let features = items
        .into_iter()
        .map(|(rings, props)| Feature {
            bbox: None,
            geometry: Some(Geometry::new(Value::Polygon(
                rings.iter().map(|r| r.iter().map(map).collect()).collect(),
            ))),
            id: None,
            properties: Some(props),
            foreign_members: None,
        })
        .collect();
    let mut fm = JsonObject::new();
    fm.insert(COORDINATE_SPACE_KEY.into(), space.name().into());
    FeatureCollection {
        bbox: None,
        features,
        foreign_members: Some(fm),
    }
}

pub fn labels_to_geojson(labels: &LabelSet, transform: Option<&Affine>) -> String {
    let fc = feature_collection(
        labels.polygons.iter().map(|p| (p.rings().collect(), JsonObject::new())),
        transform,
    );
    GeoJson::FeatureCollection(fc).to_string()
}

pub fn write_labels(labels: &LabelSet, transform: Option<&Affine>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, labels_to_geojson(labels, transform)).map_err(|e| Error::io(path, e))
}

/// Sorted x positions where the horizontal line `y = yc` crosses the rings.
/// An edge counts when exactly one endpoint lies strictly above the line
/// (the half-open rule of the classic crossing-number test).
fn crossings<'a>(rings: impl Iterator<Item = &'a Ring>, yc: f64, out: &mut Vec<f64>) {
    out.clear();
    for ring in rings {
        for e in ring.windows(2) {
            let ((x0, y0), (x1, y1)) = (e[0], e[1]);
            if (y0 > yc) != (y1 > yc) {
                out.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
            }
        }
    }
    out.sort_by(f64::total_cmp);
}

/// Even-odd point-in-polygon over all rings, holes included.
pub fn contains(polygon: &LabelPolygon, x: f64, y: f64) -> bool {
    let mut inside = false;
    for ring in polygon.rings() {
        for e in ring.windows(2) {
            let ((x0, y0), (x1, y1)) = (e[0], e[1]);
            if (y0 > y) != (y1 > y) && x < x0 + (y - y0) * (x1 - x0) / (y1 - y0) {
                inside = !inside;
            }
        }
    }
    inside
}

/// Paints one polygon: a pixel is set when its centre lies inside.
pub fn rasterize_polygon(polygon: &LabelPolygon, mask: &mut Mask) {
    let (w, h) = (mask.width, mask.height);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(_, y) in &polygon.exterior {
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if !(ymin.is_finite() && ymax.is_finite()) {
        return;
    }
    let row0 = ((ymin - 0.5).floor().max(0.0)) as usize;
    let row1 = ((ymax + 0.5).ceil().max(0.0) as usize).min(h);
    let mut xs = Vec::new();
    for row in row0..row1 {
        let yc = row as f64 + 0.5;
        crossings(polygon.rings(), yc, &mut xs);
        // a centre xc is inside when an odd number of crossings lie to its
        // right, i.e. xs[2k] <= xc < xs[2k+1]
        for pair in xs.chunks_exact(2) {
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(w as f64);
            let mut x = start as usize;
            while (x as f64) < end {
                mask.set(x, row, true);
                x += 1;
            }
        }
    }
}

/// Union of all polygons, pixel-centre rule, holes cleared.
pub fn rasterize(labels: &LabelSet, width: usize, height: usize) -> Mask {
    let mut mask = Mask::zeros(width, height);
    for p in &labels.polygons {
        rasterize_polygon(p, &mut mask);
    }
    mask
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when two non-adjacent edges of a closed ring touch or cross.
pub fn ring_self_intersects(ring: &Ring) -> bool {
    let n = ring.len().saturating_sub(1);
    if n < 4 {
        return false;
    }
    for i in 0..n {
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

//! Whole-scene inference: rotation TTA per tile, overlap stitching,
//! thresholding, cleanup and vectorization to rectangles.

pub mod mbr;
pub mod trace;

pub use mbr::{convex_hull, min_bounding_rectangle, rectangularize, Rect};
pub use trace::{fill_holes, signed_area, trace_polygons, PolygonFeature};

use crate::error::{Error, Result};
use crate::networks::{Checkpoint, NetworkSpec};
use crate::preprocess::{morph, MorphOp, ScalerParams};
use crate::raster::augment::rotate_plane;
use crate::raster::labels::{feature_collection, Ring};
use crate::raster::tiling::tile_origins;
use crate::raster::{Affine, Mask, Raster};
use crate::tensor::{ParamStore, Shape, Tensor};
use crate::trainer::sigmoid;
use geojson::{GeoJson, JsonObject};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Anything that maps an NCHW batch of square tiles to per-pixel
/// probabilities of shape N×1×H×W.
pub trait TileModel: Sync {
    fn in_channels(&self) -> usize;
    fn probabilities(&self, x: &Tensor) -> Result<Tensor>;
}

/// A trained network with the scaler it was trained with.
#[derive(Debug, Clone)]
pub struct Segmenter {
    pub spec: NetworkSpec,
    pub params: ParamStore,
    pub scaler: Option<ScalerParams>,
}

impl Segmenter {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Segmenter {
            spec: ck.spec.clone(),
            params: ck.params.clone(),
            scaler: ck.meta.scaler.clone(),
        }
    }
}

impl TileModel for Segmenter {
    fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    fn probabilities(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        if let Some(sc) = &self.scaler {
            let s = x.shape();
            let plane = s.h * s.w;
            for chunk in x.data_mut().chunks_mut(s.c * plane) {
                sc.apply(chunk, plane)?;
            }
        }
        Ok(self.spec.predict_logits(&self.params, x)?.map(sigmoid))
    }
}

fn rotate_batch(x: &Tensor, k: usize) -> Tensor {
    let s = x.shape();
    let plane = s.h * s.w;
    let mut out = Vec::with_capacity(x.len());
    for p in x.data().chunks(plane) {
        out.extend(rotate_plane(p, s.h, k));
    }
    Tensor::from_vec(s, out).expect("rotation keeps the shape")
}

/// Mean over the four quarter turns of the un-rotated predictions, summed
/// in turn order.
pub fn predict_tile_tta(model: &dyn TileModel, x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.h != s.w {
        return Err(Error::contract("predict_tile_tta", format!("tiles must be square, got {s}")));
    }
    let mut acc: Vec<f64> = Vec::new();
    for k in 0..4 {
        let p = model.probabilities(&rotate_batch(x, k))?;
        let back = rotate_batch(&p, (4 - k) % 4);
        if acc.is_empty() {
            acc = vec![0.0; back.len()];
        }
        for (a, &v) in acc.iter_mut().zip(back.data()) {
            *a += v as f64;
        }
    }
    Tensor::from_vec(
        Shape::new(s.n, 1, s.h, s.w),
        acc.into_iter().map(|v| (v / 4.0) as f32).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub tile: usize,
    pub stride: usize,
    pub batch: usize,
    pub tta: bool,
    /// `None` uses the threshold stored in the checkpoint.
    pub threshold: Option<f32>,
    pub open_radius: usize,
    /// Polygons with fewer pixels are discarded before rectangle fitting.
    pub min_area: f64,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            tile: 64,
            stride: 32,
            batch: 32,
            tta: true,
            threshold: None,
            open_radius: 1,
            min_area: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub prob: Vec<f32>,
    /// Number of tiles that covered each pixel.
    pub count: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferTiming {
    pub tiles: usize,
    pub seconds: f64,
    pub tiles_per_second: f64,
}

/// Runs the model over overlapping tiles of `scene` and averages the
/// overlapping predictions per pixel.
pub fn stitch(scene: &Raster, model: &dyn TileModel, cfg: &InferConfig) -> Result<(ProbabilityMap, InferTiming)> {
    let started = Instant::now();
    let (w, h, size) = (scene.width, scene.height, cfg.tile);
    if w < size || h < size {
        return Err(Error::invalid(
            "scene",
            format!("{w}x{h} is smaller than one {size}x{size} tile"),
        ));
    }
    if scene.bands != model.in_channels() {
        return Err(Error::Shape {
            op: "stitch",
            operand: "scene",
            axis: "bands",
            expected: model.in_channels(),
            found: scene.bands,
        });
    }
    let xs = tile_origins(w, size, cfg.stride)?;
    let ys = tile_origins(h, size, cfg.stride)?;
    let origins: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let bands: Vec<Vec<f32>> = (0..scene.bands).map(|b| scene.band_f32(b)).collect();
    let plane = size * size;
    let preds: Vec<(Vec<(usize, usize)>, Tensor)> = origins
        .par_chunks(cfg.batch.max(1))
        .map(|chunk| {
            let mut data = Vec::with_capacity(chunk.len() * bands.len() * plane);
            for &(x0, y0) in chunk {
                for b in &bands {
                    for y in y0..y0 + size {
                        data.extend_from_slice(&b[y * w + x0..y * w + x0 + size]);
                    }
                }
            }
            let x = Tensor::from_vec(Shape::new(chunk.len(), bands.len(), size, size), data)?;
            let p = if cfg.tta { predict_tile_tta(model, &x)? } else { model.probabilities(&x)? };
            Ok((chunk.to_vec(), p))
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0f64; w * h];
    let mut count = vec![0u16; w * h];
    for (chunk, p) in &preds {
        for (k, &(x0, y0)) in chunk.iter().enumerate() {
            let tile = &p.data()[k * plane..(k + 1) * plane];
            for ty in 0..size {
                let row = (y0 + ty) * w + x0;
                for tx in 0..size {
                    sum[row + tx] += tile[ty * size + tx] as f64;
                    count[row + tx] += 1;
                }
            }
        }
    }
    let prob = sum
        .iter()
        .zip(&count)
        .map(|(&s, &c)| ((s / c as f64) as f32).clamp(0.0, 1.0))
        .collect();
    let seconds = started.elapsed().as_secs_f64();
    Ok((
        ProbabilityMap {
            width: w,
            height: h,
            prob,
            count,
        },
        InferTiming {
            tiles: origins.len(),
            seconds,
            tiles_per_second: origins.len() as f64 / seconds.max(1e-9),
        },
    ))
}

/// `p >= threshold` per pixel.
pub fn to_mask(map: &ProbabilityMap, threshold: f32) -> Mask {
    Mask {
        width: map.width,
        height: map.height,
        data: map.prob.iter().map(|&p| (p >= threshold) as u8).collect(),
    }
}

/// Morphological opening that removes specks and thin protrusions.
pub fn cleanup(mask: &Mask, radius: usize) -> Mask {
    morph(mask, MorphOp::Open, radius)
}

/// Cleanup, tracing and rectangle fitting of a binary mask.
pub fn vectorize(mask: &Mask, cfg: &InferConfig) -> Vec<PolygonFeature> {
    let clean = cleanup(mask, cfg.open_radius);
    trace_polygons(&clean)
        .iter()
        .filter(|f| f.area >= cfg.min_area)
        .filter_map(rectangularize)
        .collect()
}

/// GeoJSON text for the features; with a transform the coordinates are in
/// world space and rings are reoriented to stay counter-clockwise there.
pub fn features_to_geojson(features: &[PolygonFeature], transform: Option<&Affine>) -> String {
    let flip = transform.is_some_and(|t| t.determinant() < 0.0);
    let rings: Vec<Ring> = features
        .iter()
        .map(|f| {
            let mut r = f.exterior.clone();
            if flip {
                r.reverse();
            }
            r
        })
        .collect();
    let items = features.iter().zip(&rings).map(|(f, r)| {
        let mut props = JsonObject::new();
        props.insert("area".into(), f.area.into());
        props.insert("component".into(), f.component.into());
        if f.degenerate {
            props.insert("degenerate".into(), true.into());
        }
        (vec![r], props)
    });
    GeoJson::FeatureCollection(feature_collection(items, transform)).to_string()
}

pub fn emit_geojson(features: &[PolygonFeature], transform: Option<&Affine>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, features_to_geojson(features, transform)).map_err(|e| Error::io(path, e))
}

use crate::config::{ConfigError, RunConfig};
use anyhow::{bail, Context, Result};
use greenseg::dataset::{build_split, fit_train_scaler, prepare_scene, DatasetConfig, DropRecord, SplitSummary};
use greenseg::infer::{emit_geojson, stitch, to_mask, vectorize, InferTiming, ProbabilityMap, Segmenter};
use greenseg::metrics::{evaluate, MetricsReport};
use greenseg::networks::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use greenseg::preprocess::{condition_scene, ScalerParams};
use greenseg::raster::{
    generate_scene, rasterize, read_labels, read_raster, read_tiles, write_labels, write_mask_pgm, write_pgm, write_raster,
    write_tiles, Affine, Mask, Raster, SceneConfig, TileRecord,
};
use greenseg::trainer::{
    hard_example_mining, history_csv, train_epochs, BestRecord, EpochUpdate, HemRoundReport, PlateauAction,
    TrainState,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const TRAIN_TILES: &str = "train.ghts";
pub const TRAIN_UNFILTERED: &str = "train_unfiltered.ghts";
pub const VAL_TILES: &str = "val.ghts";
pub const SCALER: &str = "scaler.json";
pub const MANIFEST: &str = "manifest.json";
pub const BEST: &str = "best.gsck";
pub const LAST: &str = "last.gsck";
pub const HISTORY: &str = "history.csv";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| greenseg::Error::Io {
        path: path.to_owned(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text).map_err(greenseg::Error::from)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        greenseg::Error::Io {
            path: dir.to_owned(),
            source: e,
        }
        .into()
    })
}

pub fn scene_stem(i: usize) -> String {
    format!("scene_{i:04}")
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    for i in 0..cfg.synth.count {
        let sc = SceneConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..cfg.synth.scene.clone()
        };
        let scene = generate_scene(&sc)?;
        let stem = scene_stem(i);
        write_raster(&scene.raster, out.join(format!("{stem}.ghsr")))?;
        write_labels(&scene.labels, Some(&scene.raster.transform), out.join(format!("{stem}.geojson")))?;
    }
    cfg.write_resolved(out)?;
    log::info!("wrote {} scene(s) to {}", cfg.synth.count, out.display());
    Ok(())
}

/// A raster with the labels file sharing its stem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePair {
    pub id: u32,
    pub raster: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: u32,
    pub raster: String,
    pub labels: String,
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Every `.ghsr` file in `dir`, sorted by name, with its `.geojson` labels.
pub fn scan_scenes(dir: &Path, first_id: u32) -> Result<Vec<ScenePair>> {
    let entries = std::fs::read_dir(dir).map_err(|e| greenseg::Error::Io {
        path: dir.to_owned(),
        source: e,
    })?;
    let mut rasters: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ghsr"))
        .collect();
    rasters.sort();
    if rasters.is_empty() {
        bail!(greenseg::Error::Invalid {
            what: "scene directory",
            detail: format!("{} holds no .ghsr rasters", dir.display()),
        });
    }
    rasters
        .into_iter()
        .enumerate()
        .map(|(i, raster)| {
            let labels = raster.with_extension("geojson");
            if !labels.exists() {
                bail!(greenseg::Error::Invalid {
                    what: "scene directory",
                    detail: format!("{} has no labels file {}", raster.display(), labels.display()),
                });
            }
            Ok(ScenePair {
                id: first_id + i as u32,
                raster,
                labels,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub scenes: Vec<SceneEntry>,
    pub summary: SplitSummary,
    pub dropped: Vec<DropRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub channels: usize,
    pub train: SplitManifest,
    pub val: SplitManifest,
}

fn prepare_split(pairs: &[ScenePair], cfg: &DatasetConfig, paste: bool, seed: u64) -> Result<(greenseg::dataset::Split, usize)> {
    use rayon::prelude::*;
    let prepared: Vec<(Vec<TileRecord>, usize)> = pairs
        .par_iter()
        .map(|p| -> Result<_> {
            let raw = read_raster(&p.raster)?;
            let labels = read_labels(&p.labels, &raw.transform)?;
            let scene = prepare_scene(&raw, &labels, p.id, cfg).with_context(|| format!("preparing {}", p.raster.display()))?;
            Ok((scene.tiles, scene.conditioned.bands))
        })
        .collect::<Result<_>>()?;
    let channels = prepared.first().map_or(0, |p| p.1);
    let split = build_split(prepared.into_iter().map(|p| p.0).collect(), cfg, paste, seed);
    Ok((split, channels))
}

fn to_manifest(scenes: Vec<ScenePair>, split: &greenseg::dataset::Split) -> SplitManifest {
    SplitManifest {
        scenes: scenes
            .into_iter()
            .map(|p| SceneEntry {
                id: p.id,
                raster: file_name(&p.raster),
                labels: file_name(&p.labels),
            })
            .collect(),
        summary: split.summary.clone(),
        dropped: split.dropped.clone(),
    }
}

pub fn prepare(cfg: &RunConfig, train_dir: &Path, val_dir: &Path, out: &Path) -> Result<Manifest> {
    let train_pairs = scan_scenes(train_dir, 0)?;
    let val_pairs = scan_scenes(val_dir, train_pairs.len() as u32)?;
    create_dir(out)?;
    let (train, channels) = prepare_split(&train_pairs, &cfg.dataset, true, cfg.seed)?;
    let (val, _) = prepare_split(&val_pairs, &cfg.dataset, false, cfg.seed)?;
    write_tiles(&train.kept, out.join(TRAIN_TILES))?;
    write_tiles(&train.unfiltered, out.join(TRAIN_UNFILTERED))?;
    write_tiles(&val.kept, out.join(VAL_TILES))?;
    if train.kept.is_empty() {
        log::warn!("no training tile survived filtering; no scaler is written");
    } else {
        write_json(&out.join(SCALER), &fit_train_scaler(&train.kept)?)?;
    }
    let manifest = Manifest {
        seed: cfg.seed,
        dataset: cfg.dataset.clone(),
        channels,
        train: to_manifest(train_pairs, &train),
        val: to_manifest(val_pairs, &val),
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    cfg.write_resolved(out)?;
    log::info!(
        "train: {} of {} tiles kept ({} pasted); val: {} of {}",
        manifest.train.summary.kept,
        manifest.train.summary.tiles,
        manifest.train.summary.pasted,
        manifest.val.summary.kept,
        manifest.val.summary.tiles
    );
    Ok(manifest)
}

/// Tiles and scaler produced by `prepare`.
pub struct PreparedData {
    pub manifest: Manifest,
    pub train: Vec<TileRecord>,
    pub unfiltered: Vec<TileRecord>,
    pub val: Vec<TileRecord>,
    pub scaler: ScalerParams,
}

pub fn load_prepared(dir: &Path, with_unfiltered: bool) -> Result<PreparedData> {
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    let weights = &manifest.dataset.tiling.weights;
    let train = read_tiles(dir.join(TRAIN_TILES), weights)?;
    let val = read_tiles(dir.join(VAL_TILES), weights)?;
    let unfiltered = if with_unfiltered {
        read_tiles(dir.join(TRAIN_UNFILTERED), weights)?
    } else {
        Vec::new()
    };
    if train.is_empty() || val.is_empty() {
        bail!(greenseg::Error::Invalid {
            what: "prepared data",
            detail: format!("{} has {} training and {} validation tiles", dir.display(), train.len(), val.len()),
        });
    }
    let scaler = read_json(&dir.join(SCALER))?;
    Ok(PreparedData {
        manifest,
        train,
        unfiltered,
        val,
        scaler,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: String,
    pub parameters: usize,
    pub trainable_parameters: usize,
    pub train_tiles: usize,
    pub val_tiles: usize,
    pub epochs_run: u32,
    pub stopped_early: bool,
    pub best: Option<BestRecord>,
    pub seconds: f64,
}

fn checkpoint_meta(best: &BestRecord, data: &PreparedData, seed: u64) -> CheckpointMeta {
    CheckpointMeta {
        epoch: best.epoch as usize,
        val_f1: Some(best.val_f1),
        threshold: best.threshold,
        scaler: Some(data.scaler.clone()),
        preprocess: Some(data.manifest.dataset.preprocess.clone()),
        seed,
    }
}

/// Saves `best.gsck` whenever validation F1 improves.
fn best_saver<'a>(
    spec: &'a greenseg::networks::NetworkSpec,
    data: &'a PreparedData,
    seed: u64,
    out: &'a Path,
) -> impl FnMut(&EpochUpdate<'_>) -> greenseg::Result<()> + 'a {
    move |u| {
        if u.action == PlateauAction::Improved {
            let best = u.state.best.expect("improvement sets the best record");
            save_checkpoint(
                &Checkpoint {
                    spec: spec.clone(),
                    params: u.state.params.clone(),
                    meta: checkpoint_meta(&best, data, seed),
                },
                out.join(BEST),
            )?;
        }
        Ok(())
    }
}

fn save_last(spec: &greenseg::networks::NetworkSpec, state: &TrainState, data: &PreparedData, seed: u64, out: &Path) -> Result<()> {
    let rec = state.best.unwrap_or(BestRecord {
        epoch: state.epoch,
        val_f1: 0.0,
        threshold: 0.5,
    });
    let mut meta = checkpoint_meta(&rec, data, seed);
    meta.epoch = state.epoch as usize;
    meta.val_f1 = None;
    save_checkpoint(
        &Checkpoint {
            spec: spec.clone(),
            params: state.params.clone(),
            meta,
        },
        out.join(LAST),
    )?;
    Ok(())
}

pub fn train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainReport> {
    let data = load_prepared(data_dir, false)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let tc = greenseg::trainer::TrainConfig {
        arch: cfg.network.arch,
        ..cfg.train.clone()
    };
    let spec = cfg.network.build(data.train[0].channels)?;
    let (parameters, trainable_parameters) = spec.count_parameters();
    let mut state = TrainState::new(spec.init_params(cfg.seed)?, &tc);
    let t0 = Instant::now();
    let mut saver = best_saver(&spec, &data, cfg.seed, out);
    let outcome = train_epochs(&spec, &mut state, &data.train, &data.val, Some(&data.scaler), &tc, tc.epochs, &mut saver)?;
    save_last(&spec, &state, &data, cfg.seed, out)?;
    std::fs::write(out.join(HISTORY), history_csv(&outcome.history))?;
    let report = TrainReport {
        arch: cfg.network.arch.name().to_owned(),
        parameters,
        trainable_parameters,
        train_tiles: data.train.len(),
        val_tiles: data.val.len(),
        epochs_run: state.epoch,
        stopped_early: outcome.stopped_early,
        best: state.best,
        seconds: t0.elapsed().as_secs_f64(),
    };
    write_json(&out.join("train_report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HemReport {
    pub start: BestRecord,
    pub rounds: Vec<HemRoundReport>,
    pub best: BestRecord,
    pub seconds: f64,
}

/// Hard example mining continued from a checkpoint. Checkpoints carry no
/// optimizer state, so the optimizer starts fresh.
pub fn hem(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, out: &Path) -> Result<HemReport> {
    let mut data = load_prepared(data_dir, true)?;
    let ck = load_checkpoint(checkpoint)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let start = BestRecord {
        epoch: ck.meta.epoch as u32,
        val_f1: ck.meta.val_f1.unwrap_or(0.0),
        threshold: ck.meta.threshold,
    };
    let tc = greenseg::trainer::TrainConfig {
        arch: ck.spec.arch,
        ..cfg.train.clone()
    };
    let mut state = TrainState::new(ck.params.clone(), &tc);
    state.epoch = start.epoch;
    state.best = Some(start);
    let t0 = Instant::now();
    let mut train = std::mem::take(&mut data.train);
    let mut saver = best_saver(&ck.spec, &data, cfg.seed, out);
    let (rounds, history) =
        hard_example_mining(&ck.spec, &mut state, &mut train, &data.unfiltered, &data.val, Some(&data.scaler), &tc, &mut saver)?;
    std::fs::write(out.join(HISTORY), history_csv(&history))?;
    let best = rounds
        .iter()
        .filter_map(|r| r.after)
        .chain(std::iter::once(start))
        .fold(start, |a, b| if b.val_f1 > a.val_f1 { b } else { a });
    let report = HemReport {
        start,
        rounds,
        best,
        seconds: t0.elapsed().as_secs_f64(),
    };
    write_json(&out.join("hem_report.json"), &report)?;
    Ok(report)
}

/// Mirrors the stored conditioning so inference sees what training saw.
fn conditioned_input(ck: &Checkpoint, raw: &Raster, fallback: &RunConfig) -> Result<Raster> {
    let pre = ck.meta.preprocess.as_ref().unwrap_or(&fallback.dataset.preprocess);
    Ok(condition_scene(raw, pre)?)
}

fn prob_raster(map: &ProbabilityMap, transform: Affine) -> Result<Raster> {
    Ok(Raster::new_f32(map.width, map.height, 1, map.prob.clone(), transform)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub threshold: f32,
    pub polygons: usize,
    pub timing: InferTiming,
}

pub fn infer(cfg: &RunConfig, checkpoint: &Path, raster: &Path, threshold: Option<f32>, out: &Path) -> Result<InferReport> {
    let ck = load_checkpoint(checkpoint)?;
    let raw = read_raster(raster)?;
    create_dir(out)?;
    cfg.write_resolved(out)?;
    let input = conditioned_input(&ck, &raw, cfg)?;
    let model = Segmenter::from_checkpoint(&ck);
    let (map, timing) = stitch(&input, &model, &cfg.infer)?;
    let threshold = threshold.or(cfg.infer.threshold).unwrap_or(ck.meta.threshold);
    write_raster(&prob_raster(&map, raw.transform)?, out.join("prob.ghsr"))?;
    write_pgm(out.join("prob.pgm"), map.width, map.height, &map.prob, 0.0, 1.0)?;
    let mask = to_mask(&map, threshold);
    write_mask_pgm(out.join("mask.pgm"), &mask)?;
    let features = vectorize(&mask, &cfg.infer);
    emit_geojson(&features, Some(&raw.transform), out.join("polygons.geojson"))?;
    write_json(&out.join("timing.json"), &timing)?;
    let report = InferReport {
        threshold,
        polygons: features.len(),
        timing,
    };
    write_json(&out.join("infer_report.json"), &report)?;
    log::info!("{} tiles in {:.2}s, {} polygon(s)", report.timing.tiles, report.timing.seconds, report.polygons);
    Ok(report)
}

fn read_prob(path: &Path) -> Result<(Raster, Vec<f32>)> {
    let r = read_raster(path)?;
    if r.bands != 1 {
        bail!(greenseg::Error::Invalid {
            what: "probability raster",
            detail: format!("{} has {} bands, expected 1", path.display(), r.bands),
        });
    }
    let prob = r.band_f32(0);
    Ok((r, prob))
}

/// Where eval gets its predictions from.
pub enum EvalSource<'a> {
    Checkpoint { checkpoint: &'a Path, raster: &'a Path },
    Prob(&'a Path),
}

pub fn eval(cfg: &RunConfig, source: EvalSource<'_>, labels: &Path, threshold: Option<f32>, out: &Path) -> Result<MetricsReport> {
    let (prob, transform, width, height, default_thr) = match source {
        EvalSource::Checkpoint { checkpoint, raster } => {
            let ck = load_checkpoint(checkpoint)?;
            let raw = read_raster(raster)?;
            let input = conditioned_input(&ck, &raw, cfg)?;
            let (map, _) = stitch(&input, &Segmenter::from_checkpoint(&ck), &cfg.infer)?;
            (map.prob, raw.transform, raw.width, raw.height, ck.meta.threshold)
        }
        EvalSource::Prob(p) => {
            let (r, prob) = read_prob(p)?;
            (prob, r.transform, r.width, r.height, 0.5)
        }
    };
    let truth: Mask = rasterize(&read_labels(labels, &transform)?, width, height);
    let threshold = threshold.or(cfg.infer.threshold).unwrap_or(default_thr);
    let report = evaluate(&prob, &truth.data, threshold);
    create_dir(out)?;
    cfg.write_resolved(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    Ok(report)
}

pub fn vectorize_cmd(cfg: &RunConfig, prob: &Path, threshold: Option<f32>, out: &Path) -> Result<usize> {
    let (r, values) = read_prob(prob)?;
    let threshold = threshold.or(cfg.infer.threshold).unwrap_or(0.5);
    if !(0.0..=1.0).contains(&threshold) {
        bail!(ConfigError(format!("threshold {threshold} is outside [0, 1]")));
    }
    let map = ProbabilityMap {
        width: r.width,
        height: r.height,
        count: vec![1; values.len()],
        prob: values,
    };
    let features = vectorize(&to_mask(&map, threshold), &cfg.infer);
    create_dir(out)?;
    cfg.write_resolved(out)?;
    emit_geojson(&features, Some(&r.transform), out.join("polygons.geojson"))?;
    Ok(features.len())
}

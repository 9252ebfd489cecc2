use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::cache::{self, derive_seed, sha256_file, stamp, KeyBuilder, Manifest, SourceStamp};
use super::{assign_subsets, make_fold_plan, FoldPlan, PipelineConfig, Stage, StageOutcome};
use crate::detect2d::{predict_maps, rasterize_labels, train_detector, DetectorModel, LabelledStack};
use crate::eval::{froc, is_hit, stage1_metrics, write_report, Detection, FrocResult, Reference, ReportInput, Stage1Summary, StreamRow};
use crate::fpr3d::{extract_at, extract_patch, score_candidates, train_fpr, FprEnsemble, FprModel, LabelledPatch};
use crate::ingest::container::{read_array, write_array, ArrayData, StoredArray};
use crate::ingest::{load_annotations, load_volume, normalize_hu, resample_z, CtVolume, NoduleAnnotation};
use crate::lungseg::{apply_mask, segment_lungs};
use crate::merge::{fuse_streams, stream_candidates, write_candidates, Candidate};
use crate::mip::{build_mip_stack, MipStack};
use crate::{Error, Result};

/// Normalized intensity above which a voxel may seed a sampled negative.
const SAMPLED_NEGATIVE_LEVEL: f32 = 0.5;
/// Sampled negatives keep this clearance (mm) beyond a nodule's radius.
const SAMPLED_NEGATIVE_CLEARANCE_MM: f64 = 3.0;
/// Half side of the density window.
const DENSITY_RADIUS: usize = 3;

/// Fraction of voxels above `level` in the clipped cube of half side `r`
/// around every voxel, from a 3-D prefix sum.
fn bright_fraction(v: &Array3<f32>, level: f32, r: usize) -> Array3<f32> {
    let (nz, ny, nx) = v.dim();
    let mut s = Array3::<u32>::zeros((nz + 1, ny + 1, nx + 1));
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let b = u32::from(v[[z, y, x]] > level);
                s[[z + 1, y + 1, x + 1]] = b + s[[z, y + 1, x + 1]] + s[[z + 1, y, x + 1]] + s[[z + 1, y + 1, x]]
                    - s[[z, y, x + 1]]
                    - s[[z, y + 1, x]]
                    - s[[z + 1, y, x]]
                    + s[[z, y, x]];
            }
        }
    }
    Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
        let (z0, y0, x0) = (z.saturating_sub(r), y.saturating_sub(r), x.saturating_sub(r));
        let (z1, y1, x1) = ((z + r + 1).min(nz), (y + r + 1).min(ny), (x + r + 1).min(nx));
        let sum = s[[z1, y1, x1]] + s[[z0, y0, x1]] + s[[z0, y1, x0]] + s[[z1, y0, x0]]
            - s[[z0, y1, x1]]
            - s[[z1, y0, x1]]
            - s[[z1, y1, x0]]
            - s[[z0, y0, x0]];
        sum as f32 / ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f32
    })
}

/// One stage-one row of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub name: String,
    pub thickness: Option<u32>,
    pub summary: Stage1Summary,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fold: usize,
    pub seed: u64,
    pub config_hash: String,
    pub test_scans: Vec<String>,
    pub stage1: Vec<MetricsRow>,
    pub froc: FrocResult,
}

#[derive(Debug, Clone, Default)]
struct Keys {
    sources: BTreeMap<String, Vec<SourceStamp>>,
    segment: BTreeMap<String, String>,
    mip: BTreeMap<String, String>,
    train_detect: String,
    detect: String,
    merge: String,
    train_fpr: String,
    score: String,
    froc: String,
    report: String,
}

/// A configured pipeline bound to one fold.
#[derive(Debug, Clone)]
pub struct Pipeline {
    cfg: PipelineConfig,
    config_hash: String,
    scan_paths: BTreeMap<String, PathBuf>,
    plan: FoldPlan,
    annotations: Vec<NoduleAnnotation>,
    keys: Keys,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_vec(value)?)?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Scans `<id>.mhd` under `root`, sorted by id.
fn discover(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(root).map_err(|e| Error::Config(format!("data root {}: {e}", root.display())))?;
    for e in entries {
        let path = e?.path();
        if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("mhd")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// The header plus its detached data file, when there is one.
fn source_files(mhd: &Path) -> Result<Vec<PathBuf>> {
    let mut files = vec![mhd.to_path_buf()];
    let bytes = fs::read(mhd)?;
    let text = String::from_utf8_lossy(&bytes);
    for line in text.lines() {
        let Some((k, v)) = line.split_once('=') else { continue };
        if k.trim() == "ElementDataFile" {
            let v = v.trim();
            if v != "LOCAL" && !v.starts_with("LIST") {
                files.push(mhd.parent().unwrap_or(Path::new(".")).join(v));
            }
            break;
        }
    }
    Ok(files)
}

/// Applies `f` to every item on up to `workers` threads, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item visited"))
        .collect()
}

fn by_series(cands: Vec<Candidate>) -> BTreeMap<String, Vec<Candidate>> {
    let mut out: BTreeMap<String, Vec<Candidate>> = BTreeMap::new();
    for c in cands {
        out.entry(c.series_id.clone()).or_default().push(c);
    }
    out
}

fn detections_for(cands: &[Candidate], scans: &[String]) -> Vec<Detection> {
    cands.iter().filter(|c| scans.contains(&c.series_id)).map(Detection::from).collect()
}

impl Pipeline {
    /// Resolves scans, annotations and the fold plan, and derives every
    /// stage key. Reads raw inputs only when their size or mtime changed.
    pub fn open(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let found = discover(&cfg.data_root)?;
        if found.is_empty() {
            return Err(Error::Config(format!("no .mhd scans under {}", cfg.data_root.display())));
        }
        let subsets = if cfg.subsets.is_empty() {
            assign_subsets(&found.keys().cloned().collect::<Vec<_>>(), cfg.n_subsets)?
        } else {
            cfg.subsets.clone()
        };
        let plan = make_fold_plan(&subsets, cfg.fold, cfg.seed)?;
        let mut scan_paths = BTreeMap::new();
        for id in plan.all_scans() {
            let p = found
                .get(&id)
                .ok_or_else(|| Error::Config(format!("scan {id} not found under {}", cfg.data_root.display())))?;
            scan_paths.insert(id, p.clone());
        }
        let ann_path = cfg.annotations_path();
        let annotations = load_annotations(&ann_path)?;
        let ann_hash = sha256_file(&ann_path)?;
        let config_hash = cfg.config_hash()?;
        let mut p = Self {
            cfg,
            config_hash,
            scan_paths,
            plan,
            annotations,
            keys: Keys::default(),
        };
        p.derive_keys(&ann_hash)?;
        Ok(p)
    }

    fn derive_keys(&mut self, ann_hash: &str) -> Result<()> {
        let cfg = &self.cfg;
        let mut k = Keys::default();
        for (id, path) in &self.scan_paths {
            let previous = Manifest::read(&self.scan_dir(id).join("segment.json"))?
                .map(|m| m.sources)
                .unwrap_or_default();
            let stamps = source_files(path)?
                .iter()
                .map(|f| stamp(f, &previous))
                .collect::<Result<Vec<_>>>()?;
            let hashes: Vec<&str> = stamps.iter().map(|s| s.sha256.as_str()).collect();
            let seg = KeyBuilder::new("segment").json("lungseg", &cfg.lungseg)?.json("raw", &hashes)?.finish();
            let mip = KeyBuilder::new("mip").json("thicknesses", &cfg.thicknesses)?.bytes("segment", seg.as_bytes()).finish();
            k.sources.insert(id.clone(), stamps);
            k.segment.insert(id.clone(), seg);
            k.mip.insert(id.clone(), mip);
        }
        let dev = self.plan.development_scans();
        let pick = |m: &BTreeMap<String, String>, ids: &[String]| -> Vec<String> { ids.iter().map(|i| m[i].clone()).collect() };
        k.train_detect = KeyBuilder::new("train-detect")
            .json("detector", &cfg.detector)?
            .json("train2d", &cfg.train2d)?
            .json("seed", &cfg.seed)?
            .json("train", &self.plan.train)?
            .json("val", &self.plan.val)?
            .bytes("annotations", ann_hash.as_bytes())
            .json("mip", &pick(&k.mip, &dev))?
            .finish();
        k.detect = KeyBuilder::new("detect")
            .json("threshold", &cfg.threshold)?
            .bytes("train-detect", k.train_detect.as_bytes())
            .json("mip", &pick(&k.mip, &self.plan.all_scans()))?
            .finish();
        k.merge = KeyBuilder::new("merge").bytes("detect", k.detect.as_bytes()).finish();
        k.train_fpr = KeyBuilder::new("train-fpr")
            .json("fpr", &cfg.fpr)?
            .json("seed", &cfg.seed)?
            .json("train", &self.plan.train)?
            .json("val", &self.plan.val)?
            .bytes("annotations", ann_hash.as_bytes())
            .bytes("merge", k.merge.as_bytes())
            .json("segment", &pick(&k.segment, &dev))?
            .finish();
        k.score = KeyBuilder::new("score")
            .bytes("train-fpr", k.train_fpr.as_bytes())
            .bytes("merge", k.merge.as_bytes())
            .json("segment", &pick(&k.segment, &self.plan.test))?
            .finish();
        k.froc = KeyBuilder::new("froc")
            .bytes("score", k.score.as_bytes())
            .bytes("annotations", ann_hash.as_bytes())
            .json("test", &self.plan.test)?
            .finish();
        k.report = KeyBuilder::new("report")
            .bytes("froc", k.froc.as_bytes())
            .bytes("config", self.config_hash.as_bytes())
            .finish();
        self.keys = k;
        Ok(())
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn scan_dir(&self, id: &str) -> PathBuf {
        self.cfg.cache_root.join("scans").join(id)
    }

    pub fn fold_dir(&self) -> PathBuf {
        self.cfg.cache_root.join(format!("fold-{}", self.plan.fold))
    }

    /// Final scored candidates of the test scans.
    pub fn candidates_csv(&self) -> PathBuf {
        self.fold_dir().join("candidates.csv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.fold_dir().join("metrics.json")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.fold_dir().join("report")
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome> {
        log::info!("stage {stage}");
        let (cached, message) = match stage {
            Stage::Segment => self.segment()?,
            Stage::Mip => self.mip()?,
            Stage::TrainDetect => self.train_detect()?,
            Stage::Detect => self.detect()?,
            Stage::Merge => self.merge()?,
            Stage::TrainFpr => self.train_fpr()?,
            Stage::Score => self.score()?,
            Stage::Froc => self.froc()?,
            Stage::Report => self.report()?,
        };
        Ok(StageOutcome { stage, cached, message })
    }

    fn require(&self, stage: Stage, manifest: &Path, key: &str, upstream: Stage, what: &str) -> Result<Manifest> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let state = match Manifest::read(manifest)? {
            Some(m) if m.is_current(key, dir) => return Ok(m),
            Some(_) => "is out of date",
            None => "was not found",
        };
        Err(Error::MissingDependency {
            stage: stage.name().into(),
            what: format!("{what} {state}"),
            run_first: upstream.name().into(),
        })
    }

    fn require_segment(&self, stage: Stage, ids: &[String]) -> Result<()> {
        for id in ids {
            let m = self.scan_dir(id).join("segment.json");
            self.require(stage, &m, &self.keys.segment[id], Stage::Segment, &format!("segmented volume of {id}"))?;
        }
        Ok(())
    }

    fn require_mip(&self, stage: Stage, ids: &[String]) -> Result<()> {
        for id in ids {
            let m = self.scan_dir(id).join("mip.json");
            self.require(stage, &m, &self.keys.mip[id], Stage::Mip, &format!("MIP stacks of {id}"))?;
        }
        Ok(())
    }

    fn fold_manifest(&self, stage: Stage) -> PathBuf {
        self.fold_dir().join(format!("{}.json", stage.name()))
    }

    fn cached(&self, stage: Stage, key: &str) -> Result<bool> {
        Ok(cache::current(&self.fold_manifest(stage), key)?.is_some())
    }

    fn finish(&self, stage: Stage, key: &str, outputs: Vec<String>, info: BTreeMap<String, String>) -> Result<()> {
        let mut m = Manifest::new(stage.name(), key);
        m.outputs = outputs;
        m.info = info;
        m.write(&self.fold_manifest(stage))
    }

    /// Normalized, lung-masked 1 mm volume from the cache.
    pub fn load_volume(&self, id: &str) -> Result<CtVolume> {
        read_array(&self.scan_dir(id).join("volume.arr"))?.to_volume()
    }

    pub fn load_stack(&self, id: &str, t: u32) -> Result<MipStack> {
        let arr = read_array(&self.scan_dir(id).join(format!("mip-{t}.arr")))?;
        let geometry = arr.geometry();
        let images = arr.data.to_f32();
        let z0 = geometry.origin[2];
        Ok(MipStack {
            z_centers: (0..images.dim().0).map(|k| z0 + k as f64).collect(),
            images,
            slab_thickness: t,
            series_id: id.to_string(),
            geometry,
        })
    }

    fn nodules_of(&self, id: &str) -> Vec<NoduleAnnotation> {
        self.annotations.iter().filter(|a| a.series_id == id).cloned().collect()
    }

    fn segment(&self) -> Result<(bool, String)> {
        let ids: Vec<String> = self.scan_paths.keys().cloned().collect();
        let hits = par_map(&ids, self.cfg.workers, |id| self.segment_scan(id))?;
        let fresh = hits.iter().filter(|&&h| !h).count();
        Ok((fresh == 0, format!("{} scans segmented, {} cached", fresh, ids.len() - fresh)))
    }

    fn segment_scan(&self, id: &str) -> Result<bool> {
        let dir = self.scan_dir(id);
        let mpath = dir.join("segment.json");
        let key = &self.keys.segment[id];
        if cache::current(&mpath, key)?.is_some() {
            return Ok(true);
        }
        fs::create_dir_all(&dir)?;
        let raw = load_volume(&self.scan_paths[id])?;
        raw.ensure_screening_thickness()?;
        let v = normalize_hu(&resample_z(&raw)?);
        let mask = segment_lungs(&v, &self.cfg.lungseg)?;
        let masked = apply_mask(&v, &mask)?;
        let mut arr = StoredArray::new(ArrayData::F32(masked.voxels), masked.geometry, id);
        let fraction = format!("{:.6}", mask.volume_fraction);
        arr.header.meta.insert("lung_fraction".into(), fraction.clone());
        write_array(&dir.join("volume.arr"), &arr)?;
        let mut m = Manifest::new(Stage::Segment.name(), key);
        m.outputs.push("volume.arr".into());
        m.sources = self.keys.sources[id].clone();
        m.info.insert("lung_fraction".into(), fraction);
        m.write(&mpath)?;
        log::info!("segmented {id}");
        Ok(false)
    }

    fn mip(&self) -> Result<(bool, String)> {
        let ids: Vec<String> = self.scan_paths.keys().cloned().collect();
        self.require_segment(Stage::Mip, &ids)?;
        let hits = par_map(&ids, self.cfg.workers, |id| self.mip_scan(id))?;
        let fresh = hits.iter().filter(|&&h| !h).count();
        Ok((fresh == 0, format!("{} scans projected, {} cached", fresh, ids.len() - fresh)))
    }

    fn mip_scan(&self, id: &str) -> Result<bool> {
        let dir = self.scan_dir(id);
        let mpath = dir.join("mip.json");
        let key = &self.keys.mip[id];
        if cache::current(&mpath, key)?.is_some() {
            return Ok(true);
        }
        let v = self.load_volume(id)?;
        let mut m = Manifest::new(Stage::Mip.name(), key);
        for &t in &self.cfg.thicknesses {
            let stack = build_mip_stack(&v, t as f64)?;
            let mut arr = StoredArray::new(ArrayData::F32(stack.images), stack.geometry, id);
            arr.header.meta.insert("slab_thickness".into(), t.to_string());
            let name = format!("mip-{t}.arr");
            write_array(&dir.join(&name), &arr)?;
            m.outputs.push(name);
        }
        m.write(&mpath)?;
        Ok(false)
    }

    fn labelled_stacks(&self, ids: &[String], t: u32) -> Result<Vec<LabelledStack>> {
        ids.iter()
            .map(|id| {
                let stack = self.load_stack(id, t)?;
                let labels = rasterize_labels(&self.nodules_of(id), &stack);
                LabelledStack::new(stack, labels)
            })
            .collect()
    }

    fn train_detect(&self) -> Result<(bool, String)> {
        let key = &self.keys.train_detect;
        if self.cached(Stage::TrainDetect, key)? {
            return Ok((true, "detectors up to date".into()));
        }
        self.require_mip(Stage::TrainDetect, &self.plan.development_scans())?;
        let dir = self.fold_dir();
        fs::create_dir_all(&dir)?;
        let mut outputs = Vec::new();
        let mut info = BTreeMap::new();
        for &t in &self.cfg.thicknesses {
            let train = self.labelled_stacks(&self.plan.train, t)?;
            let val = self.labelled_stacks(&self.plan.val, t)?;
            let mut tc = self.cfg.train2d.clone();
            tc.seed = derive_seed(self.cfg.seed, &format!("detector-{t}"));
            let started = std::time::Instant::now();
            let out = train_detector(&train, &val, &self.cfg.detector, &tc)?;
            log::info!(
                "detector {t} mm: best epoch {} of {}, {} steps, {:.1}s",
                out.best_epoch,
                out.stopped_epoch,
                out.steps,
                started.elapsed().as_secs_f64()
            );
            let name = format!("detector-{t}.model");
            let log_name = format!("detector-{t}.log.jsonl");
            out.write_log(&dir.join(&log_name))?;
            let mut model = out.model;
            model.save(&dir.join(&name))?;
            info.insert(format!("best_epoch_{t}"), out.best_epoch.to_string());
            outputs.extend([name, log_name]);
        }
        self.finish(Stage::TrainDetect, key, outputs, info)?;
        Ok((false, format!("{} detector streams trained", self.cfg.thicknesses.len())))
    }

    fn stream_path(&self, t: u32) -> PathBuf {
        self.fold_dir().join(format!("stream-{t}.json"))
    }

    fn detect(&self) -> Result<(bool, String)> {
        let key = &self.keys.detect;
        if self.cached(Stage::Detect, key)? {
            return Ok((true, "stream candidates up to date".into()));
        }
        self.require(
            Stage::Detect,
            &self.fold_manifest(Stage::TrainDetect),
            &self.keys.train_detect,
            Stage::TrainDetect,
            "trained detectors",
        )?;
        let ids = self.plan.all_scans();
        self.require_mip(Stage::Detect, &ids)?;
        let mut outputs = Vec::new();
        let mut info = BTreeMap::new();
        for &t in &self.cfg.thicknesses {
            let mut model = DetectorModel::load(&self.fold_dir().join(format!("detector-{t}.model")))?;
            let mut all = Vec::new();
            for id in &ids {
                let stack = self.load_stack(id, t)?;
                let maps = predict_maps(&mut model, &stack)?;
                all.extend(stream_candidates(&maps, &stack, self.cfg.threshold)?);
            }
            info.insert(format!("candidates_{t}"), all.len().to_string());
            write_json(&self.stream_path(t), &all)?;
            outputs.push(format!("stream-{t}.json"));
        }
        self.finish(Stage::Detect, key, outputs, info)?;
        Ok((false, format!("detection run on {} scans", ids.len())))
    }

    fn merge(&self) -> Result<(bool, String)> {
        let key = &self.keys.merge;
        if self.cached(Stage::Merge, key)? {
            return Ok((true, "fused candidates up to date".into()));
        }
        self.require(Stage::Merge, &self.fold_manifest(Stage::Detect), &self.keys.detect, Stage::Detect, "stream candidates")?;
        let mut per_scan: BTreeMap<String, Vec<Vec<Candidate>>> = BTreeMap::new();
        for &t in &self.cfg.thicknesses {
            let stream: Vec<Candidate> = read_json(&self.stream_path(t))?;
            let grouped = by_series(stream);
            for id in self.plan.all_scans() {
                per_scan.entry(id.clone()).or_default().push(grouped.get(&id).cloned().unwrap_or_default());
            }
        }
        let fused: Vec<Candidate> = per_scan.values().flat_map(|streams| fuse_streams(streams)).collect();
        let dir = self.fold_dir();
        write_json(&dir.join("fused.json"), &fused)?;
        write_candidates(&dir.join("fused.csv"), &fused)?;
        let mut info = BTreeMap::new();
        info.insert("candidates".into(), fused.len().to_string());
        self.finish(Stage::Merge, key, vec!["fused.json".into(), "fused.csv".into()], info)?;
        Ok((false, format!("{} fused candidates", fused.len())))
    }

    fn load_fused(&self) -> Result<BTreeMap<String, Vec<Candidate>>> {
        Ok(by_series(read_json(&self.fold_dir().join("fused.json"))?))
    }

    /// Labelled cubes for both classifiers: candidates labelled by the hit
    /// rule, optional reference-centred positives, optional sampled
    /// negatives.
    fn fpr_patches(
        &self,
        ids: &[String],
        fused: &BTreeMap<String, Vec<Candidate>>,
        sides: [usize; 2],
        rng: &mut ChaCha8Rng,
    ) -> Result<[Vec<LabelledPatch>; 2]> {
        let mut out: [Vec<LabelledPatch>; 2] = [Vec::new(), Vec::new()];
        let fc = &self.cfg.fpr;
        for id in ids {
            let v = self.load_volume(id)?;
            let nodules = self.nodules_of(id);
            let mut centres: Vec<([usize; 3], bool)> = Vec::new();
            for c in fused.get(id).map(Vec::as_slice).unwrap_or_default() {
                let label = nodules.iter().any(|n| is_hit(c.center_world, n));
                for (i, &side) in sides.iter().enumerate() {
                    out[i].push(LabelledPatch {
                        voxels: extract_patch(&v, c, side)?.voxels,
                        label,
                    });
                }
            }
            if fc.annotation_positives {
                for n in &nodules {
                    for copy in 0..fc.annotation_positive_copies.max(1) {
                        // later copies move the centre up to half a radius
                        let mut w = n.center_world;
                        if copy > 0 {
                            let reach = n.radius_mm() / 2.0;
                            loop {
                                let d: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-reach..=reach));
                                if d.iter().map(|x| x * x).sum::<f64>() <= reach * reach {
                                    w = std::array::from_fn(|a| w[a] + d[a]);
                                    break;
                                }
                            }
                        }
                        let p = v.world_to_voxel(w);
                        if v.contains_voxel(p) {
                            let r = |x: f64| x.round() as usize;
                            centres.push(([r(p[2]), r(p[1]), r(p[0])], true));
                        }
                    }
                }
            }
            if fc.sampled_negatives_per_scan > 0 {
                let density = bright_fraction(&v.voxels, SAMPLED_NEGATIVE_LEVEL, DENSITY_RADIUS);
                let max_density = fc.sampled_negative_max_density as f32;
                let pool: Vec<[usize; 3]> = v
                    .voxels
                    .indexed_iter()
                    .filter(|&(i, &x)| x > SAMPLED_NEGATIVE_LEVEL && density[i] <= max_density)
                    .map(|((z, y, x), _)| [z, y, x])
                    .filter(|&[z, y, x]| {
                        let w = v.voxel_to_world([x as f64, y as f64, z as f64]);
                        nodules.iter().all(|n| {
                            let d2: f64 = (0..3).map(|a| (w[a] - n.center_world[a]).powi(2)).sum();
                            d2.sqrt() > n.radius_mm() + SAMPLED_NEGATIVE_CLEARANCE_MM
                        })
                    })
                    .collect();
                centres.extend(
                    pool.choose_multiple(rng, fc.sampled_negatives_per_scan)
                        .map(|&c| (c, false)),
                );
            }
            for (c, label) in centres {
                for (i, &side) in sides.iter().enumerate() {
                    out[i].push(LabelledPatch {
                        voxels: extract_at(&v, c, side).voxels,
                        label,
                    });
                }
            }
        }
        Ok(out)
    }

    fn train_fpr(&self) -> Result<(bool, String)> {
        let key = &self.keys.train_fpr;
        if self.cached(Stage::TrainFpr, key)? {
            return Ok((true, "classifiers up to date".into()));
        }
        self.require(Stage::TrainFpr, &self.fold_manifest(Stage::Merge), &self.keys.merge, Stage::Merge, "fused candidates")?;
        self.require_segment(Stage::TrainFpr, &self.plan.development_scans())?;
        let fused = self.load_fused()?;
        let fc = &self.cfg.fpr;
        let specs = [&fc.archi2, &fc.archi3];
        let sides = [fc.archi2.patch_side, fc.archi3.patch_side];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "fpr-patches"));
        let train = self.fpr_patches(&self.plan.train, &fused, sides, &mut rng)?;
        let val = self.fpr_patches(&self.plan.val, &fused, sides, &mut rng)?;
        let mut outputs = Vec::new();
        let mut info = BTreeMap::new();
        let positives = train[0].iter().filter(|p| p.label).count();
        info.insert("train_patches".into(), train[0].len().to_string());
        info.insert("train_positives".into(), positives.to_string());
        for (i, name) in ["archi2", "archi3"].into_iter().enumerate() {
            let mut tc = fc.train.clone();
            tc.seed = derive_seed(self.cfg.seed, name);
            let started = std::time::Instant::now();
            let out = train_fpr(&train[i], &val[i], specs[i], &tc)?;
            log::info!(
                "{name}: best epoch {} of {}, {} steps, {:.1}s",
                out.best_epoch,
                out.stopped_epoch,
                out.steps,
                started.elapsed().as_secs_f64()
            );
            let file = format!("fpr-{name}.model");
            let mut model = out.model;
            model.save(&self.fold_dir().join(&file))?;
            let log_file = format!("fpr-{name}.log.jsonl");
            let mut text = String::new();
            for r in &out.log {
                text.push_str(&serde_json::to_string(r)?);
                text.push('\n');
            }
            fs::write(self.fold_dir().join(&log_file), text)?;
            info.insert(format!("best_epoch_{name}"), out.best_epoch.to_string());
            outputs.extend([file, log_file]);
        }
        self.finish(Stage::TrainFpr, key, outputs, info)?;
        Ok((false, format!("classifiers trained on {} patches ({positives} positive)", train[0].len())))
    }

    fn score(&self) -> Result<(bool, String)> {
        let key = &self.keys.score;
        if self.cached(Stage::Score, key)? {
            return Ok((true, "scores up to date".into()));
        }
        self.require(
            Stage::Score,
            &self.fold_manifest(Stage::TrainFpr),
            &self.keys.train_fpr,
            Stage::TrainFpr,
            "trained classifiers",
        )?;
        self.require(Stage::Score, &self.fold_manifest(Stage::Merge), &self.keys.merge, Stage::Merge, "fused candidates")?;
        self.require_segment(Stage::Score, &self.plan.test)?;
        let mut ensemble = FprEnsemble {
            archi2: Some(FprModel::load(&self.fold_dir().join("fpr-archi2.model"))?),
            archi3: Some(FprModel::load(&self.fold_dir().join("fpr-archi3.model"))?),
        };
        let fused = self.load_fused()?;
        let mut scored = Vec::new();
        for id in &self.plan.test {
            let Some(cands) = fused.get(id) else { continue };
            let v = self.load_volume(id)?;
            let probs = score_candidates(&v, cands, &mut ensemble)?;
            for (c, p) in cands.iter().zip(probs) {
                scored.push(Candidate {
                    probability: p,
                    ..c.clone()
                });
            }
        }
        write_json(&self.fold_dir().join("scored.json"), &scored)?;
        write_candidates(&self.candidates_csv(), &scored)?;
        self.finish(Stage::Score, key, vec!["scored.json".into(), "candidates.csv".into()], BTreeMap::new())?;
        Ok((false, format!("{} test candidates scored", scored.len())))
    }

    fn froc(&self) -> Result<(bool, String)> {
        let key = &self.keys.froc;
        if self.cached(Stage::Froc, key)? {
            return Ok((true, "metrics up to date".into()));
        }
        self.require(Stage::Froc, &self.fold_manifest(Stage::Score), &self.keys.score, Stage::Score, "scored candidates")?;
        let test = &self.plan.test;
        let reference = Reference::new(&self.annotations, test.iter().cloned());
        let mut stage1 = Vec::new();
        for (i, &t) in self.cfg.thicknesses.iter().enumerate() {
            let stream: Vec<Candidate> = read_json(&self.stream_path(t))?;
            stage1.push(MetricsRow {
                name: format!("Stream {}", i + 1),
                thickness: Some(t),
                summary: stage1_metrics(&detections_for(&stream, test), &reference)?,
            });
        }
        let fused: Vec<Candidate> = read_json(&self.fold_dir().join("fused.json"))?;
        stage1.push(MetricsRow {
            name: "Fusion".into(),
            thickness: None,
            summary: stage1_metrics(&detections_for(&fused, test), &reference)?,
        });
        let scored: Vec<Candidate> = read_json(&self.fold_dir().join("scored.json"))?;
        let curve = froc(&detections_for(&scored, test), &reference)?;
        let metrics = Metrics {
            fold: self.plan.fold,
            seed: self.cfg.seed,
            config_hash: self.config_hash.clone(),
            test_scans: test.clone(),
            stage1,
            froc: curve,
        };
        write_json(&self.metrics_path(), &metrics)?;
        let msg = format!(
            "sensitivity {:.3} at 1 FP/scan, {:.3} at 4 FPs/scan, CPM {:.3}",
            metrics.froc.sensitivity_at(1.0),
            metrics.froc.sensitivity_at(4.0),
            metrics.froc.cpm()
        );
        self.finish(Stage::Froc, key, vec!["metrics.json".into()], BTreeMap::new())?;
        Ok((false, msg))
    }

    /// Cached candidates of one detector stream, all scans.
    pub fn load_stream(&self, t: u32) -> Result<Vec<Candidate>> {
        read_json(&self.stream_path(t))
    }

    /// Cached fused candidates, all scans.
    pub fn load_fused_candidates(&self) -> Result<Vec<Candidate>> {
        read_json(&self.fold_dir().join("fused.json"))
    }

    pub fn annotations(&self) -> &[NoduleAnnotation] {
        &self.annotations
    }

    pub fn load_metrics(&self) -> Result<Metrics> {
        read_json(&self.metrics_path())
    }

    fn report(&self) -> Result<(bool, String)> {
        let key = &self.keys.report;
        if let Some(_m) = cache::current(&self.fold_manifest(Stage::Report), key)? {
            let text = fs::read_to_string(self.report_dir().join("summary.txt"))?;
            return Ok((true, text));
        }
        self.require(Stage::Report, &self.fold_manifest(Stage::Froc), &self.keys.froc, Stage::Froc, "evaluation metrics")?;
        let m = self.load_metrics()?;
        let input = ReportInput {
            title: format!(
                "Fold {} ({} test scans), seed {}, config sha256 {}",
                m.fold,
                m.test_scans.len(),
                m.seed,
                m.config_hash
            ),
            stage1: m
                .stage1
                .iter()
                .map(|r| StreamRow {
                    name: r.name.clone(),
                    thickness: r.thickness,
                    summary: r.summary.clone(),
                })
                .collect(),
            froc: Some(m.froc),
        };
        let text = write_report(&self.report_dir(), &input)?;
        let outputs = ["summary.txt", "froc.csv", "froc.png"].map(|f| format!("report/{f}")).to_vec();
        self.finish(Stage::Report, key, outputs, BTreeMap::new())?;
        Ok((false, text))
    }
}

//! Dataset management and end-to-end orchestration.
//!
//! Stages: tile ingestion (1000x1000 -> 256x256 patches), organ-level
//! train/test splits, optional stain normalization, shape-dictionary
//! construction, synthesis training, synthetic dataset generation,
//! segmentation training, tiled inference, evaluation, and report emission.
//! `run_all` wires them together; the CLI exposes each as a verb.
//!
//! Everything is seeded from the run configuration. Manifest timestamps
//! honor `SOURCE_DATE_EPOCH` (the reproducible-builds convention), so two
//! runs of one config in a pinned environment produce byte-identical
//! manifests and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::error::{Error, Result};
use crate::masks::{
    build_shape_dictionary_tagged, render_instances, sample_mask, SamplerParams, ShapeDictionary,
};
use crate::metrics::{ImageMetrics, MetricsReport};
use crate::raster::{write_bytes_atomic, InstanceMap, RgbImage};
use crate::seg::{
    image_input, jitter_pair, render_target, segment_image, SegTrainConfig, SegTrainer,
};
use crate::stain::{estimate_stain_basis, normalize_to_target, to_optical_density, StainBasis};
use crate::synth::{
    generate_synthetic_dataset, hex_string, image_to_tensor, SynthTrainConfig, SynthTrainer,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
}

/// One dataset entry; paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub instances: String,
    pub organ: String,
    pub patient: String,
    pub split: Split,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub config_hash: String,
    pub created_at: String,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>, config_hash: String) -> Self {
        DatasetManifest { records, config_hash, created_at: manifest_timestamp() }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        write_bytes_atomic(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::ManifestValidation(format!("{}: {e}", path.display())))
    }

    /// Reject manifests with missing files or images straddling splits.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for rec in &self.records {
            for file in [&rec.image, &rec.instances] {
                let p = base_dir.join(file);
                if !p.exists() {
                    return Err(Error::ManifestValidation(format!(
                        "missing file: {}",
                        p.display()
                    )));
                }
            }
            if let Some(&prev) = seen.get(rec.image.as_str()) {
                if prev != rec.split {
                    return Err(Error::ManifestValidation(format!(
                        "{} appears in both splits",
                        rec.image
                    )));
                }
            }
            seen.insert(&rec.image, rec.split);
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Concatenate two manifests (e.g. real + synthetic training data).
    pub fn merged(&self, other: &DatasetManifest) -> DatasetManifest {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        let mut hasher = sha2::Sha256::new();
        hasher.update(self.config_hash.as_bytes());
        hasher.update(other.config_hash.as_bytes());
        DatasetManifest::new(records, hex_string(&hasher.finalize()))
    }
}

/// RFC3339 creation stamp; `SOURCE_DATE_EPOCH` overrides wall time so runs
/// can be byte-reproducible.
fn manifest_timestamp() -> String {
    if let Ok(epoch) = std::env::var("SOURCE_DATE_EPOCH") {
        if let Ok(secs) = epoch.parse::<i64>() {
            if let Some(dt) = chrono::DateTime::from_timestamp(secs, 0) {
                return dt.to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
            }
        }
    }
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

// ---------------------------------------------------------------------------
// patch extraction
// ---------------------------------------------------------------------------

/// Grid-decompose aligned (image, instance map) tiles into patches.
///
/// Pairs are discovered either from a `tiles.csv` index
/// (`image,instances,organ,patient`) or by the `<stem>.png` +
/// `<stem>.inst.png` convention with `organ_patient_*` stems. Misaligned
/// pairs are skipped with a warning; the run continues.
pub fn extract_patches(
    tiles_dir: &Path,
    patch: usize,
    stride: usize,
    out_dir: &Path,
) -> Result<(DatasetManifest, Vec<String>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pairs = discover_tiles(tiles_dir)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no tile pairs found in {}",
            tiles_dir.display()
        )));
    }
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    for tile in &pairs {
        let img = RgbImage::load(&tile.image)?;
        let inst = InstanceMap::load(&tile.instances)?;
        if (img.height(), img.width()) != (inst.height(), inst.width()) {
            warnings.push(format!(
                "skipping {}: image {}x{} vs instances {}x{}",
                tile.image.display(),
                img.height(),
                img.width(),
                inst.height(),
                inst.width()
            ));
            continue;
        }
        let stem = tile
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "tile".into());
        for y0 in grid_positions(img.height(), patch, stride) {
            for x0 in grid_positions(img.width(), patch, stride) {
                let sub_img = crop_image(&img, y0, x0, patch);
                let sub_inst = crop_instances(&inst, y0, x0, patch).canonicalize();
                let img_name = format!("{stem}_y{y0}_x{x0}.png");
                let inst_name = format!("{stem}_y{y0}_x{x0}.inst.png");
                sub_img.save(out_dir.join(&img_name))?;
                sub_inst.save(out_dir.join(&inst_name))?;
                records.push(ManifestRecord {
                    image: img_name,
                    instances: inst_name,
                    organ: tile.organ.clone(),
                    patient: tile.patient.clone(),
                    split: Split::Train,
                    source: Source::Real,
                    seed: None,
                });
            }
        }
    }
    let mut hasher = sha2::Sha256::new();
    hasher.update(patch.to_le_bytes());
    hasher.update(stride.to_le_bytes());
    for t in &pairs {
        hasher.update(t.image.to_string_lossy().as_bytes());
    }
    let manifest = DatasetManifest::new(records, hex_string(&hasher.finalize()));
    manifest.save(out_dir.join("manifest.json"))?;
    Ok((manifest, warnings))
}

/// Patch origins: fixed-stride grid, no edge pinning (matches
/// floor((size - patch)/stride) + 1 patches per axis).
fn grid_positions(size: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos + patch <= size {
        out.push(pos);
        pos += stride;
    }
    out
}

fn crop_image(img: &RgbImage, y0: usize, x0: usize, size: usize) -> RgbImage {
    RgbImage::from_fn(size, size, |y, x| img.get(y0 + y, x0 + x))
}

fn crop_instances(inst: &InstanceMap, y0: usize, x0: usize, size: usize) -> InstanceMap {
    let mut out = InstanceMap::new(size, size);
    for y in 0..size {
        for x in 0..size {
            out.labels[[y, x]] = inst.labels[[y0 + y, x0 + x]];
        }
    }
    out
}

struct TilePair {
    image: PathBuf,
    instances: PathBuf,
    organ: String,
    patient: String,
}

fn discover_tiles(dir: &Path) -> Result<Vec<TilePair>> {
    let index = dir.join("tiles.csv");
    if index.exists() {
        let mut reader = csv::Reader::from_path(&index)
            .map_err(|e| Error::InvalidArgument(format!("tiles.csv: {e}")))?;
        let mut out = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::InvalidArgument(format!("tiles.csv: {e}")))?;
            if rec.len() < 4 {
                return Err(Error::InvalidArgument(
                    "tiles.csv needs image,instances,organ,patient columns".into(),
                ));
            }
            out.push(TilePair {
                image: dir.join(&rec[0]),
                instances: dir.join(&rec[1]),
                organ: rec[2].to_string(),
                patient: rec[3].to_string(),
            });
        }
        return Ok(out);
    }
    // filename convention: <organ>_<patient>_*.png with <stem>.inst.png
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let name = path.file_name().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let is_image = [".png", ".tif", ".tiff"].iter().any(|ext| name.ends_with(ext));
        if !is_image || name.ends_with(".inst.png") {
            continue;
        }
        let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
        let inst = dir.join(format!("{stem}.inst.png"));
        if !inst.exists() {
            continue;
        }
        let parts: Vec<&str> = stem.split('_').collect();
        let organ = parts.first().copied().unwrap_or("unknown").to_string();
        let patient = if parts.len() >= 2 {
            format!("{}_{}", parts[0], parts[1])
        } else {
            "unknown".to_string()
        };
        out.push(TilePair { image: path, instances: inst, organ, patient });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

/// Assign train/test splits by organ.
///
/// Organs appearing in only one list go there wholesale. Organs in both
/// lists are divided by patient: patients sort lexicographically and
/// alternate train, test, train, ... so no patient ever spans splits.
/// Records whose organ is in neither list are dropped.
pub fn make_splits(
    manifest: &DatasetManifest,
    train_organs: &[String],
    test_organs: &[String],
) -> Result<DatasetManifest> {
    let mut available: Vec<String> = manifest.records.iter().map(|r| r.organ.clone()).collect();
    available.sort();
    available.dedup();
    for organ in train_organs.iter().chain(test_organs) {
        if !available.contains(organ) {
            return Err(Error::InvalidArgument(format!(
                "organ {organ:?} not in manifest; available: {}",
                available.join(", ")
            )));
        }
    }
    let mut records = Vec::new();
    for organ in &available {
        let in_train = train_organs.contains(organ);
        let in_test = test_organs.contains(organ);
        let organ_records: Vec<&ManifestRecord> =
            manifest.records.iter().filter(|r| &r.organ == organ).collect();
        if in_train && in_test {
            let mut patients: Vec<String> =
                organ_records.iter().map(|r| r.patient.clone()).collect();
            patients.sort();
            patients.dedup();
            let assignment: BTreeMap<&String, Split> = patients
                .iter()
                .enumerate()
                .map(|(i, p)| (p, if i % 2 == 0 { Split::Train } else { Split::Test }))
                .collect();
            for rec in organ_records {
                let mut rec = rec.clone();
                rec.split = assignment[&rec.patient];
                records.push(rec);
            }
        } else if in_train || in_test {
            let split = if in_train { Split::Train } else { Split::Test };
            for rec in organ_records {
                let mut rec = rec.clone();
                rec.split = split;
                records.push(rec);
            }
        }
    }
    if !records.iter().any(|r| r.split == Split::Test) {
        return Err(Error::InvalidArgument("split assignment produced an empty test set".into()));
    }
    // no patient may span splits
    let mut patient_split: BTreeMap<&String, Split> = BTreeMap::new();
    for rec in &records {
        if let Some(&prev) = patient_split.get(&rec.patient) {
            if prev != rec.split {
                return Err(Error::ManifestValidation(format!(
                    "patient {} spans both splits",
                    rec.patient
                )));
            }
        }
        patient_split.insert(&rec.patient, rec.split);
    }
    Ok(DatasetManifest::new(records, manifest.config_hash.clone()))
}

// ---------------------------------------------------------------------------
// overlays and reports
// ---------------------------------------------------------------------------

/// Fig-2-style overlay: green where prediction and ground truth agree on
/// foreground, red where exactly one is foreground, untouched background.
pub fn render_overlay(gt: &InstanceMap, pred: &InstanceMap, img: &RgbImage) -> Result<RgbImage> {
    if gt.labels.shape() != pred.labels.shape()
        || gt.height() != img.height()
        || gt.width() != img.width()
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", img.height(), img.width()),
            got: format!("{}x{} / {}x{}", gt.height(), gt.width(), pred.height(), pred.width()),
        });
    }
    let blend = |base: [u8; 3], tint: [u8; 3]| -> [u8; 3] {
        [
            ((base[0] as u16 + tint[0] as u16) / 2) as u8,
            ((base[1] as u16 + tint[1] as u16) / 2) as u8,
            ((base[2] as u16 + tint[2] as u16) / 2) as u8,
        ]
    };
    Ok(RgbImage::from_fn(img.height(), img.width(), |y, x| {
        let g = gt.labels[[y, x]] > 0;
        let p = pred.labels[[y, x]] > 0;
        let base = img.get(y, x);
        match (g, p) {
            (true, true) => blend(base, [0, 255, 0]),
            (true, false) | (false, true) => blend(base, [255, 0, 0]),
            (false, false) => base,
        }
    }))
}

/// Emit per-image, per-organ, and overall metrics for one or more methods
/// as CSV (`<base>.csv`, `<base>.summary.csv`) and JSON (`<base>.json`).
///
/// The overall row aggregates over images, not over organ means.
pub fn build_report(reports: &[(String, MetricsReport)], out_base: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no reports to write".into()));
    }
    let base = out_base.to_string_lossy();
    let per_image_path = PathBuf::from(format!("{base}.csv"));
    let summary_path = PathBuf::from(format!("{base}.summary.csv"));
    let json_path = PathBuf::from(format!("{base}.json"));

    let mut per_image = String::from("method,image,organ,aji,hausdorff,f1,tp,fp,fn\n");
    for (method, report) in reports {
        for m in &report.per_image {
            per_image.push_str(&format!(
                "{method},{},{},{},{},{},{},{},{}\n",
                m.image_id, m.organ, m.aji, m.hausdorff, m.f1, m.tp, m.fp, m.fn_
            ));
        }
    }
    write_bytes_atomic(&per_image_path, per_image.as_bytes())?;

    let mut summary = String::from("method,group,images,aji,hausdorff,f1\n");
    for (method, report) in reports {
        for g in report.per_organ.iter().chain(std::iter::once(&report.overall)) {
            summary.push_str(&format!(
                "{method},{},{},{},{},{}\n",
                g.group, g.images, g.aji, g.hausdorff, g.f1
            ));
        }
    }
    write_bytes_atomic(&summary_path, summary.as_bytes())?;

    let json: BTreeMap<&str, &MetricsReport> =
        reports.iter().map(|(m, r)| (m.as_str(), r)).collect();
    write_bytes_atomic(&json_path, &serde_json::to_vec_pretty(&json).expect("report serializes"))?;
    Ok(vec![per_image_path, summary_path, json_path])
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StainStage {
    pub enabled: bool,
    pub sparsity: f64,
    pub max_iters: usize,
    /// Normalization target image; when absent, stain normalization is
    /// skipped even if enabled.
    pub target: Option<PathBuf>,
}

impl Default for StainStage {
    fn default() -> Self {
        StainStage { enabled: true, sparsity: 0.1, max_iters: 200, target: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchStage {
    pub size: usize,
    pub stride: usize,
}

impl Default for PatchStage {
    fn default() -> Self {
        PatchStage { size: 256, stride: 248 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SplitStage {
    pub train_organs: Vec<String>,
    pub test_organs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferStage {
    pub tile: usize,
    pub overlap: usize,
}

impl Default for InferStage {
    fn default() -> Self {
        InferStage { tile: 256, overlap: 32 }
    }
}

/// Whole-pipeline configuration (TOML on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub tiles_dir: PathBuf,
    pub work_dir: PathBuf,
    pub stain: StainStage,
    pub patch: PatchStage,
    pub splits: SplitStage,
    pub dict_resolution: usize,
    pub sampler: SamplerParams,
    pub synth: SynthTrainConfig,
    /// Synthetic pairs to generate after synthesis training.
    pub synth_count: usize,
    pub seg: SegTrainConfig,
    pub infer: InferStage,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            tiles_dir: PathBuf::from("tiles"),
            work_dir: PathBuf::from("work"),
            stain: StainStage::default(),
            patch: PatchStage::default(),
            splits: SplitStage::default(),
            dict_resolution: 16,
            sampler: SamplerParams::default(),
            synth: SynthTrainConfig::default(),
            synth_count: 4650,
            seg: SegTrainConfig::default(),
            infer: InferStage::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        write_bytes_atomic(path, text.as_bytes())
    }

    pub fn hash(&self) -> String {
        let mut hasher = sha2::Sha256::new();
        hasher.update(toml::to_string(self).expect("config serializes").as_bytes());
        hex_string(&hasher.finalize())
    }
}

// ---------------------------------------------------------------------------
// stages
// ---------------------------------------------------------------------------

/// Normalize every record's image to the target basis, writing a parallel
/// dataset (instance maps are copied so the manifest stays self-contained).
pub fn stain_normalize_dataset(
    manifest: &DatasetManifest,
    base_dir: &Path,
    target: &StainBasis,
    sparsity: f64,
    max_iters: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    use rayon::prelude::*;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results: Result<Vec<ManifestRecord>> = manifest
        .records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let img = RgbImage::load(base_dir.join(&rec.image))?;
            let od = to_optical_density(&img, 255.0)?;
            let normalized = match estimate_stain_basis(&od, sparsity, max_iters, seed.wrapping_add(i as u64)) {
                Ok(fit) => normalize_to_target(&img, &fit, target)?,
                // patches with almost no tissue pass through unchanged
                Err(Error::InsufficientTissue { .. }) => img,
                Err(e) => return Err(e),
            };
            normalized.save(out_dir.join(&rec.image))?;
            std::fs::copy(base_dir.join(&rec.instances), out_dir.join(&rec.instances))
                .map_err(|e| Error::io(base_dir.join(&rec.instances), e))?;
            Ok(rec.clone())
        })
        .collect();
    let mut hasher = sha2::Sha256::new();
    hasher.update(manifest.config_hash.as_bytes());
    hasher.update(b"stain-normalized");
    let out = DatasetManifest::new(results?, hex_string(&hasher.finalize()));
    out.save(out_dir.join("manifest.json"))?;
    Ok(out)
}

/// Fit the stain basis of a target image.
pub fn fit_stain_target(
    target_path: &Path,
    sparsity: f64,
    max_iters: usize,
    seed: u64,
) -> Result<StainBasis> {
    let img = RgbImage::load(target_path)?;
    let od = to_optical_density(&img, 255.0)?;
    Ok(estimate_stain_basis(&od, sparsity, max_iters, seed)?.0)
}

/// Build the shape dictionary from the train split of a manifest.
pub fn build_dict_from_manifest(
    manifest: &DatasetManifest,
    base_dir: &Path,
    profile_resolution: usize,
) -> Result<ShapeDictionary> {
    let mut maps = Vec::new();
    for rec in manifest.split(Split::Train) {
        if rec.source == Source::Real {
            maps.push((rec.organ.clone(), InstanceMap::load(base_dir.join(&rec.instances))?));
        }
    }
    let refs: Vec<(String, &InstanceMap)> =
        maps.iter().map(|(o, m)| (o.clone(), m)).collect();
    build_shape_dictionary_tagged(&refs, profile_resolution)
}

/// Train the synthesis stage on unpaired (sampled masks, real patches).
pub fn train_synth_stage(
    cfg: &SynthTrainConfig,
    dict: &ShapeDictionary,
    sampler: &SamplerParams,
    real_images: &[RgbImage],
    ckpt_dir: &Path,
) -> Result<SynthTrainer> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    if real_images.is_empty() {
        return Err(Error::InvalidArgument("no real images for synthesis training".into()));
    }
    let mut trainer = SynthTrainer::new(cfg.clone())?;
    trainer.snapshot_dir = Some(ckpt_dir.join("snapshot"));
    // pre-render an unpaired mask pool the same size as the image pool
    let masks: Result<Vec<_>> = (0..real_images.len())
        .map(|i| {
            let pair = sample_mask(dict, sampler, cfg.seed.wrapping_add(5000 + i as u64))?;
            Ok(image_to_tensor(&render_instances(&pair.instances)))
        })
        .collect();
    let masks = masks?;
    let images: Vec<_> = real_images.iter().map(image_to_tensor).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(77));
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        // independent shuffles: the pairing is meaningless by design
        let mut mask_order: Vec<usize> = (0..masks.len()).collect();
        let mut image_order: Vec<usize> = (0..images.len()).collect();
        mask_order.shuffle(&mut rng);
        image_order.shuffle(&mut rng);
        for (mi, ii) in mask_order.iter().zip(&image_order) {
            trainer.train_step(&masks[*mi], &images[*ii], lr)?;
        }
    }
    trainer.save_checkpoints(ckpt_dir)?;
    Ok(trainer)
}

/// Train the segmentation stage on a manifest's train split.
pub fn train_seg_stage(
    cfg: &SegTrainConfig,
    manifest: &DatasetManifest,
    base_dir: &Path,
    ckpt_dir: &Path,
) -> Result<SegTrainer> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let records: Vec<&ManifestRecord> = manifest.split(Split::Train);
    if records.is_empty() {
        return Err(Error::InvalidArgument("no training records in manifest".into()));
    }
    let mut trainer = SegTrainer::new(cfg.clone())?;
    trainer.snapshot_dir = Some(ckpt_dir.join("snapshot"));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(99));
    let mut step: u64 = 0;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch)?;
        let mut order: Vec<usize> = (0..records.len()).collect();
        order.shuffle(&mut rng);
        for &idx in &order {
            let rec = records[idx];
            let img = RgbImage::load(base_dir.join(&rec.image))?;
            let inst = InstanceMap::load(base_dir.join(&rec.instances))?;
            let render = render_instances(&inst);
            let (jimg, jmask) =
                jitter_pair(&img, &render, &cfg.jitter, cfg.seed.wrapping_add(step))?;
            let n = image_input(&jimg);
            let m = render_target(&jmask);
            trainer.train_step(&n, &m, lr, cfg.seed.wrapping_add(1_000_000 + step))?;
            step += 1;
        }
    }
    trainer.save_checkpoints(ckpt_dir)?;
    Ok(trainer)
}

/// Segment every test record, writing `<stem>.prob.png` (8-bit) and
/// `<stem>.pred.png` (16-bit instances). Returns predicted paths.
pub fn segment_stage(
    trainer: &SegTrainer,
    manifest: &DatasetManifest,
    base_dir: &Path,
    infer: &InferStage,
    out_dir: &Path,
) -> Result<Vec<(String, PathBuf)>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs = Vec::new();
    for rec in manifest.split(Split::Test) {
        let img = RgbImage::load(base_dir.join(&rec.image))?;
        let (prob, inst) = segment_image(&trainer.s, &trainer.s_ws, &img, infer.tile, infer.overlap)?;
        let stem = Path::new(&rec.image)
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| rec.image.clone());
        let prob_path = out_dir.join(format!("{stem}.prob.png"));
        save_probability_map(&prob, &prob_path)?;
        let pred_path = out_dir.join(format!("{stem}.pred.png"));
        inst.save(&pred_path)?;
        outputs.push((rec.image.clone(), pred_path));
    }
    Ok(outputs)
}

/// Store a [-1,1] map as an 8-bit PNG.
pub fn save_probability_map(prob: &ndarray::Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = (prob.shape()[0], prob.shape()[1]);
    let img = RgbImage::from_fn(h, w, |y, x| {
        let v = ((prob[[y, x]] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        [v, v, v]
    });
    img.save(path)
}

/// Evaluate predictions against a manifest's test split ground truth.
pub fn evaluate_stage(
    manifest: &DatasetManifest,
    base_dir: &Path,
    predictions: &[(String, PathBuf)],
) -> Result<MetricsReport> {
    let pred_map: BTreeMap<&String, &PathBuf> =
        predictions.iter().map(|(k, v)| (k, v)).collect();
    let mut rows: Vec<ImageMetrics> = Vec::new();
    for rec in manifest.split(Split::Test) {
        let pred_path = pred_map.get(&rec.image).ok_or_else(|| {
            Error::InvalidArgument(format!("no prediction for {}", rec.image))
        })?;
        let gt = InstanceMap::load(base_dir.join(&rec.instances))?;
        let pred = InstanceMap::load(pred_path)?;
        rows.push(MetricsReport::evaluate_image(&rec.image, &rec.organ, &gt, &pred)?);
    }
    Ok(MetricsReport::from_images(rows))
}

/// Outcome of a full pipeline run.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub train_records: usize,
    pub test_records: usize,
    pub synthetic_records: usize,
    pub overall_aji: f64,
    pub overall_hausdorff: f64,
    pub overall_f1: f64,
    pub report_files: Vec<PathBuf>,
}

/// Execute every stage end to end under `cfg.work_dir`.
pub fn run_all(cfg: &RunConfig, base_dir: &Path) -> Result<RunSummary> {
    let work = base_dir.join(&cfg.work_dir);
    std::fs::create_dir_all(&work).map_err(|e| Error::io(&work, e))?;
    let tiles_dir = base_dir.join(&cfg.tiles_dir);

    // 1. patches
    let patches_dir = work.join("patches");
    let (manifest, warnings) =
        extract_patches(&tiles_dir, cfg.patch.size, cfg.patch.stride, &patches_dir)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    // 2. splits
    let manifest = if cfg.splits.train_organs.is_empty() && cfg.splits.test_organs.is_empty() {
        manifest
    } else {
        let split = make_splits(&manifest, &cfg.splits.train_organs, &cfg.splits.test_organs)?;
        split.save(patches_dir.join("manifest.json"))?;
        split
    };
    manifest.validate(&patches_dir)?;

    // 3. optional stain normalization
    let (manifest, data_dir) = match (&cfg.stain.enabled, &cfg.stain.target) {
        (true, Some(target)) => {
            let basis = fit_stain_target(
                &base_dir.join(target),
                cfg.stain.sparsity,
                cfg.stain.max_iters,
                cfg.seed,
            )?;
            let norm_dir = work.join("normalized");
            let m = stain_normalize_dataset(
                &manifest,
                &patches_dir,
                &basis,
                cfg.stain.sparsity,
                cfg.stain.max_iters,
                cfg.seed.wrapping_add(1),
                &norm_dir,
            )?;
            (m, norm_dir)
        }
        _ => (manifest, patches_dir.clone()),
    };

    // 4. shape dictionary from real train annotations
    let dict = build_dict_from_manifest(&manifest, &data_dir, cfg.dict_resolution)?;
    crate::masks::save_dictionary(&dict, work.join("dict.csv"))?;

    // 5. synthesis training on unpaired data
    let train_images: Result<Vec<RgbImage>> = manifest
        .split(Split::Train)
        .iter()
        .map(|r| RgbImage::load(data_dir.join(&r.image)))
        .collect();
    let synth_ckpt = work.join("ckpt-synth");
    let synth_trainer =
        train_synth_stage(&cfg.synth, &dict, &cfg.sampler, &train_images?, &synth_ckpt)?;

    // 6. synthetic dataset
    let synth_dir = work.join("synth");
    let synth_manifest = generate_synthetic_dataset(
        &synth_trainer.g,
        &synth_trainer.g_ws,
        &dict,
        &cfg.sampler,
        cfg.synth_count,
        cfg.seed.wrapping_add(2),
        &synth_dir,
        true,
    )?;

    // 7. merged training data for segmentation: copy synthetic records into
    // the data dir namespace via relative paths
    let mut merged = manifest.clone();
    for rec in &synth_manifest.records {
        let mut rec = rec.clone();
        rec.image = format!("../synth/{}", rec.image);
        rec.instances = format!("../synth/{}", rec.instances);
        merged.records.push(rec);
    }
    let merged = DatasetManifest::new(merged.records, {
        let mut hasher = sha2::Sha256::new();
        hasher.update(manifest.config_hash.as_bytes());
        hasher.update(synth_manifest.config_hash.as_bytes());
        hex_string(&hasher.finalize())
    });
    merged.save(work.join("train-manifest.json"))?;

    // 8. segmentation training
    let seg_ckpt = work.join("ckpt-seg");
    let seg_trainer = train_seg_stage(&cfg.seg, &merged, &data_dir, &seg_ckpt)?;

    // 9. inference on the test split
    let pred_dir = work.join("pred");
    let predictions = segment_stage(&seg_trainer, &manifest, &data_dir, &cfg.infer, &pred_dir)?;

    // 10. evaluation + report
    let report = evaluate_stage(&manifest, &data_dir, &predictions)?;
    let report_files =
        build_report(&[("proposed".to_string(), report.clone())], &work.join("report"))?;

    Ok(RunSummary {
        config_hash: cfg.hash(),
        train_records: manifest.split(Split::Train).len(),
        test_records: manifest.split(Split::Test).len(),
        synthetic_records: synth_manifest.records.len(),
        overall_aji: report.overall.aji,
        overall_hausdorff: report.overall.hausdorff,
        overall_f1: report.overall.f1,
        report_files,
    })
}

//! Dataset abstractions: labeled source data, unlabeled person-specific
//! data, and deterministic task construction.
//!
//! Datasets are ingested from JSON-lines manifests. A source row is
//! `{"path": str, "yaw": f64, "pitch": f64}`; a person row is
//! `{"path": str, "person_id": str}`, optionally carrying `yaw`/`pitch`
//! when the loader runs in oracle mode (evaluation needs ground truth).
//! Image paths resolve relative to the manifest's directory.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Gaze direction as yaw/pitch in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazeLabel {
    pub yaw: f64,
    pub pitch: f64,
}

impl GazeLabel {
    pub fn new(yaw: f64, pitch: f64) -> Result<GazeLabel> {
        if !yaw.is_finite() || !pitch.is_finite() {
            return Err(Error::Config("gaze label must be finite".into()));
        }
        if !(-PI..=PI).contains(&yaw) {
            return Err(Error::Config(format!("yaw {yaw} outside [-pi, pi]")));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&pitch) {
            return Err(Error::Config(format!("pitch {pitch} outside [-pi/2, pi/2]")));
        }
        Ok(GazeLabel { yaw, pitch })
    }
}

/// Dense image with intensities in [0,1], stored H x W x C row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageData {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub pixels: Vec<f64>,
}

impl ImageData {
    pub fn new(h: usize, w: usize, c: usize, pixels: Vec<f64>) -> ImageData {
        assert_eq!(pixels.len(), h * w * c);
        ImageData { h, w, c, pixels }
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> ImageData {
        ImageData {
            h,
            w,
            c,
            pixels: vec![0.0; h * w * c],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, v: f64) {
        self.pixels[(y * self.w + x) * self.c + ch] = v;
    }
}

/// One face image, optionally labeled and optionally tied to a person.
#[derive(Debug, Clone)]
pub struct GazeSample {
    pub image: ImageData,
    pub label: Option<GazeLabel>,
    pub person_id: Option<String>,
    /// Path as written in the manifest, kept for re-serialization.
    pub rel_path: String,
}

/// Labeled source data without person identities.
#[derive(Debug, Clone)]
pub struct SourceDataset {
    pub name: String,
    samples: Vec<GazeSample>,
}

impl SourceDataset {
    pub fn new(name: impl Into<String>, samples: Vec<GazeSample>) -> Result<SourceDataset> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("source dataset has no samples".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.label.is_none() {
                return Err(Error::Config(format!("source sample {i} lacks a label")));
            }
            if s.person_id.is_some() {
                return Err(Error::Config(format!(
                    "source sample {i} carries a person_id"
                )));
            }
        }
        Ok(SourceDataset {
            name: name.into(),
            samples,
        })
    }

    pub fn samples(&self) -> &[GazeSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Unlabeled images grouped by person. Persons keep manifest order.
#[derive(Debug, Clone, Default)]
pub struct PersonTaskset {
    order: Vec<String>,
    groups: std::collections::BTreeMap<String, Vec<GazeSample>>,
}

impl PersonTaskset {
    pub fn from_samples(samples: Vec<GazeSample>) -> Result<PersonTaskset> {
        let mut ts = PersonTaskset::default();
        for (i, s) in samples.into_iter().enumerate() {
            let pid = s
                .person_id
                .clone()
                .ok_or_else(|| Error::Config(format!("person sample {i} lacks person_id")))?;
            if !ts.groups.contains_key(&pid) {
                ts.order.push(pid.clone());
            }
            ts.groups.entry(pid).or_default().push(s);
        }
        if ts.order.is_empty() {
            return Err(Error::EmptyDataset("person taskset has no samples".into()));
        }
        Ok(ts)
    }

    pub fn person_ids(&self) -> &[String] {
        &self.order
    }

    pub fn n_persons(&self) -> usize {
        self.order.len()
    }

    pub fn samples_of(&self, person_id: &str) -> Result<&[GazeSample]> {
        self.groups
            .get(person_id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownPerson(person_id.to_string()))
    }

    /// Drop persons with fewer than `min_samples` images.
    pub fn filter_min_samples(mut self, min_samples: usize) -> Result<PersonTaskset> {
        self.order.retain(|pid| self.groups[pid].len() >= min_samples);
        self.groups.retain(|_, v| v.len() >= min_samples);
        if self.order.is_empty() {
            return Err(Error::EmptyDataset(format!(
                "no person has >= {min_samples} samples"
            )));
        }
        Ok(self)
    }
}

/// One meta-learning task: a person's support and query split.
#[derive(Debug, Clone)]
pub struct Task {
    pub person_id: String,
    pub support: Vec<GazeSample>,
    pub query: Vec<GazeSample>,
}

/// Which manifest schema to expect.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestKind {
    Source,
    PersonSpecific,
}

/// Loader knobs.
#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Target square resolution; images are center-cropped and resized.
    pub image_size: usize,
    /// Accept gaze labels on person-specific rows (evaluation / oracle data).
    pub oracle_mode: bool,
    /// Optional minimum image count per person; no filtering by default.
    pub min_samples_per_person: Option<usize>,
}

impl Default for LoadOptions {
    fn default() -> LoadOptions {
        LoadOptions {
            image_size: 224,
            oracle_mode: false,
            min_samples_per_person: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRow {
    path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    yaw: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pitch: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    person_id: Option<String>,
}

/// Either dataset kind, as returned by [`load_manifest`].
#[derive(Debug, Clone)]
pub enum LoadedDataset {
    Source(SourceDataset),
    Persons(PersonTaskset),
}

impl LoadedDataset {
    pub fn into_source(self) -> Result<SourceDataset> {
        match self {
            LoadedDataset::Source(s) => Ok(s),
            LoadedDataset::Persons(_) => {
                Err(Error::Config("expected a source dataset".into()))
            }
        }
    }

    pub fn into_persons(self) -> Result<PersonTaskset> {
        match self {
            LoadedDataset::Persons(p) => Ok(p),
            LoadedDataset::Source(_) => {
                Err(Error::Config("expected a person-specific dataset".into()))
            }
        }
    }
}

/// Load a JSON-lines manifest and the images it references.
///
/// Iteration order equals manifest order. Schema violations name the
/// offending line.
pub fn load_manifest(
    path: impl AsRef<Path>,
    kind: ManifestKind,
    opts: &LoadOptions,
) -> Result<LoadedDataset> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let schema_err = |line: usize, msg: String| Error::Schema {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)
            .map_err(|e| schema_err(lineno, format!("invalid row: {e}")))?;

        let label = match (row.yaw, row.pitch) {
            (Some(y), Some(p)) => Some(
                GazeLabel::new(y, p)
                    .map_err(|e| schema_err(lineno, format!("invalid label: {e}")))?,
            ),
            (None, None) => None,
            _ => {
                return Err(schema_err(
                    lineno,
                    "yaw and pitch must both be present or both absent".into(),
                ))
            }
        };

        match kind {
            ManifestKind::Source => {
                if label.is_none() {
                    return Err(schema_err(lineno, "source row lacks yaw/pitch".into()));
                }
                if row.person_id.is_some() {
                    return Err(schema_err(
                        lineno,
                        "source row must not carry person_id".into(),
                    ));
                }
            }
            ManifestKind::PersonSpecific => {
                if row.person_id.is_none() {
                    return Err(schema_err(lineno, "person row lacks person_id".into()));
                }
                if label.is_some() && !opts.oracle_mode {
                    return Err(schema_err(
                        lineno,
                        "person row carries yaw/pitch but oracle_mode is off".into(),
                    ));
                }
            }
        }

        let image = load_image(&base.join(&row.path), opts.image_size)?;
        samples.push(GazeSample {
            image,
            label,
            person_id: row.person_id,
            rel_path: row.path,
        });
    }

    match kind {
        ManifestKind::Source => Ok(LoadedDataset::Source(SourceDataset::new(
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "source".into()),
            samples,
        )?)),
        ManifestKind::PersonSpecific => {
            let mut ts = PersonTaskset::from_samples(samples)?;
            if let Some(min) = opts.min_samples_per_person {
                ts = ts.filter_min_samples(min)?;
            }
            Ok(LoadedDataset::Persons(ts))
        }
    }
}

/// Serialize a dataset back to manifest text (one JSON object per line).
pub fn manifest_text(samples: impl IntoIterator<Item = ManifestEntry>) -> String {
    let mut out = String::new();
    for entry in samples {
        let row = ManifestRow {
            path: entry.rel_path,
            yaw: entry.label.map(|l| l.yaw),
            pitch: entry.label.map(|l| l.pitch),
            person_id: entry.person_id,
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&row).expect("row json"));
    }
    out
}

/// Manifest-level view of one sample, used when writing manifests.
pub struct ManifestEntry {
    pub rel_path: String,
    pub label: Option<GazeLabel>,
    pub person_id: Option<String>,
}

impl From<&GazeSample> for ManifestEntry {
    fn from(s: &GazeSample) -> ManifestEntry {
        ManifestEntry {
            rel_path: s.rel_path.clone(),
            label: s.label,
            person_id: s.person_id.clone(),
        }
    }
}

fn load_image(path: &PathBuf, size: usize) -> Result<ImageData> {
    if !path.exists() {
        return Err(Error::MissingFile(path.clone()));
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    let img = img.to_rgb8();
    let (w, h) = (img.width(), img.height());
    // Center-crop to square, then resize to the configured resolution.
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = image::imageops::crop_imm(&img, x0, y0, side, side).to_image();
    let resized = if side == size as u32 {
        cropped
    } else {
        image::imageops::resize(
            &cropped,
            size as u32,
            size as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let pixels = resized
        .into_raw()
        .into_iter()
        .map(|b| f64::from(b) / 255.0)
        .collect();
    Ok(ImageData::new(size, size, 3, pixels))
}

/// Build one task: a disjoint support/query split of a person's samples.
///
/// Deterministic in `(taskset, person_id, k, t, seed)`.
pub fn make_task(
    taskset: &PersonTaskset,
    person_id: &str,
    k: usize,
    t: usize,
    seed: u64,
) -> Result<Task> {
    let samples = taskset.samples_of(person_id)?;
    let needed = k + t;
    if samples.len() < needed {
        return Err(Error::InsufficientSamples {
            person_id: person_id.to_string(),
            available: samples.len(),
            needed,
            support: k,
            query: t,
        });
    }
    let mut rng = seed::rng_from(seed::mix(
        seed,
        &[stream::TASK_SPLIT, seed::hash_str(person_id), k as u64, t as u64],
    ));
    let mut indices: Vec<usize> = (0..samples.len()).collect();
    // Partial Fisher-Yates: only the first k+t slots matter.
    for i in 0..needed {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let support = indices[..k].iter().map(|&i| samples[i].clone()).collect();
    let query = indices[k..needed].iter().map(|&i| samples[i].clone()).collect();
    Ok(Task {
        person_id: person_id.to_string(),
        support,
        query,
    })
}

/// Sample a meta-batch of tasks.
///
/// Persons are drawn without replacement when there are at least
/// `n_tasks` of them, with replacement otherwise. Per-task splits
/// delegate to [`make_task`].
pub fn sample_task_batch(
    taskset: &PersonTaskset,
    n_tasks: usize,
    k: usize,
    t: usize,
    seed: u64,
) -> Result<Vec<Task>> {
    if taskset.n_persons() == 0 {
        return Err(Error::EmptyDataset("person taskset has no persons".into()));
    }
    let ids = taskset.person_ids();
    let mut rng = seed::rng_from(seed::mix(seed, &[stream::TASK_SAMPLE]));
    let chosen: Vec<&String> = if ids.len() >= n_tasks {
        let mut pool: Vec<&String> = ids.iter().collect();
        pool.shuffle(&mut rng);
        pool.into_iter().take(n_tasks).collect()
    } else {
        (0..n_tasks)
            .map(|_| &ids[rng.gen_range(0..ids.len())])
            .collect()
    };
    chosen
        .into_iter()
        .enumerate()
        .map(|(i, pid)| make_task(taskset, pid, k, t, seed::mix(seed, &[stream::TASK_SPLIT, i as u64])))
        .collect()
}

/// Draw a labeled mini-batch from the source dataset (with replacement
/// when the batch exceeds the dataset, without otherwise).
pub fn sample_source_batch(source: &SourceDataset, batch: usize, seed: u64) -> Vec<GazeSample> {
    let n = source.len();
    let mut rng = seed::rng_from(seed::mix(seed, &[stream::SOURCE_BATCH]));
    if batch <= n {
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..batch {
            let j = rng.gen_range(i..n);
            indices.swap(i, j);
        }
        indices[..batch]
            .iter()
            .map(|&i| source.samples()[i].clone())
            .collect()
    } else {
        (0..batch)
            .map(|_| source.samples()[rng.gen_range(0..n)].clone())
            .collect()
    }
}

//! On-disk dataset format.
//!
//! A split directory holds shards of up to [`SHARD_SIZE`] samples and a
//! `manifest.json` that is written last, so a directory without a manifest
//! is an incomplete run. Per shard:
//!
//! * `NNNNN.readings.f32`  `[count, n_sensors]` dBm, little-endian f32
//! * `NNNNN.intruder.f32`  same shape, intruder-only readings
//! * `NNNNN.labels.f32`    `[count, grid, grid]` peak label images
//! * `NNNNN.scenes.json`   per-sample transmitter lists
//!
//! The sensor layout is shared by the whole split and stored once in the
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use txloc::data::generate_samples;
use txloc::scene::Scene;
use txloc::{FieldConfig, PeakSpec, RadioEnvironment, Sample, SeedTree, SensorLayout, Transmitter};

pub const FORMAT_VERSION: u32 = 1;
pub const SHARD_SIZE: u64 = 1000;
pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub param: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// Index of the first sample.
    pub start: u64,
    pub count: u64,
    pub readings: String,
    pub intruder_readings: String,
    pub labels: String,
    pub scenes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub field: FieldConfig,
    pub propagation: RadioEnvironment,
    pub peak: PeakSpec,
    pub num_samples: u64,
    /// Root of the seed tree the samples were drawn from.
    pub seed: u64,
    pub layout: SensorLayout,
    pub layout_fingerprint: String,
    pub sweep: Option<SweepCell>,
    pub shards: Vec<ShardEntry>,
}

/// What to generate for one split.
pub struct SplitSpec<'a> {
    pub split: &'a str,
    pub field: &'a FieldConfig,
    pub env: &'a RadioEnvironment,
    pub peak: &'a PeakSpec,
    pub layout: &'a SensorLayout,
    pub seeds: SeedTree,
    pub num_samples: u64,
    pub sweep: Option<SweepCell>,
}

fn write_f32(path: &Path, values: impl Iterator<Item = f32>) -> anyhow::Result<()> {
    let bytes: Vec<u8> = values.flat_map(f32::to_le_bytes).collect();
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_f32(path: &Path, expected: usize) -> anyhow::Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() != expected * 4 {
        bail!(txloc::Error::Shape {
            expected: format!("{expected} f32 values in {}", path.display()),
            got: format!("{} bytes", bytes.len()),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
}

/// Generates and writes one split; returns its manifest.
pub fn write_split(dir: &Path, spec: &SplitSpec) -> anyhow::Result<DatasetManifest> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest_path = dir.join(MANIFEST);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path)?;
    }
    let mut shards = Vec::new();
    let mut start = 0;
    while start < spec.num_samples {
        let end = (start + SHARD_SIZE).min(spec.num_samples);
        let samples = generate_samples(spec.env, spec.field, spec.layout, &spec.seeds, start..end)?;
        let stem = format!("{:05}", shards.len());
        let entry = ShardEntry {
            start,
            count: end - start,
            readings: format!("{stem}.readings.f32"),
            intruder_readings: format!("{stem}.intruder.f32"),
            labels: format!("{stem}.labels.f32"),
            scenes: format!("{stem}.scenes.json"),
        };
        write_f32(&dir.join(&entry.readings), samples.iter().flat_map(|s| s.readings.iter().map(|&r| r as f32)))?;
        write_f32(
            &dir.join(&entry.intruder_readings),
            samples.iter().flat_map(|s| s.intruder_readings.iter().map(|&r| r as f32)),
        )?;
        write_f32(&dir.join(&entry.labels), samples.iter().flat_map(|s| s.label(spec.peak).into_iter()))?;
        let scenes: Vec<&[Transmitter]> = samples.iter().map(|s| s.scene.transmitters.as_slice()).collect();
        fs::write(dir.join(&entry.scenes), serde_json::to_vec(&scenes)?)?;
        shards.push(entry);
        start = end;
    }
    let manifest = DatasetManifest {
        version: FORMAT_VERSION,
        split: spec.split.to_string(),
        field: spec.field.clone(),
        propagation: spec.env.clone(),
        peak: *spec.peak,
        num_samples: spec.num_samples,
        seed: spec.seeds.root(),
        layout: spec.layout.clone(),
        layout_fingerprint: spec.layout.fingerprint(),
        sweep: spec.sweep.clone(),
        shards,
    };
    let tmp = dir.join(format!("{MANIFEST}.tmp"));
    fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
    fs::rename(&tmp, &manifest_path)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> anyhow::Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("no dataset manifest at {}", path.display()))?;
    let m: DatasetManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    ensure!(m.version == FORMAT_VERSION, "unsupported dataset format version {}", m.version);
    ensure!(
        m.layout.fingerprint() == m.layout_fingerprint,
        "layout fingerprint mismatch in {}",
        path.display()
    );
    ensure!(
        m.shards.iter().map(|s| s.count).sum::<u64>() == m.num_samples,
        "shard counts do not add up to {} in {}",
        m.num_samples,
        path.display()
    );
    Ok(m)
}

/// Loads every sample of a split, checking file sizes against the manifest.
pub fn load_split(dir: &Path) -> anyhow::Result<(DatasetManifest, Vec<Sample>)> {
    let m = read_manifest(dir)?;
    let n_sensors = m.layout.len();
    let label_len = m.field.grid_size * m.field.grid_size;
    let mut samples = Vec::with_capacity(m.num_samples as usize);
    for shard in &m.shards {
        let count = shard.count as usize;
        let readings = read_f32(&dir.join(&shard.readings), count * n_sensors)?;
        let intruder = read_f32(&dir.join(&shard.intruder_readings), count * n_sensors)?;
        let labels = dir.join(&shard.labels);
        let label_bytes = fs::metadata(&labels).with_context(|| format!("missing {}", labels.display()))?.len();
        ensure!(label_bytes == (count * label_len * 4) as u64, "label file {} has the wrong size", labels.display());
        let path = dir.join(&shard.scenes);
        let scenes: Vec<Vec<Transmitter>> =
            serde_json::from_slice(&fs::read(&path).with_context(|| format!("reading {}", path.display()))?)?;
        ensure!(scenes.len() == count, "{} lists {} scenes, expected {count}", path.display(), scenes.len());
        for (k, transmitters) in scenes.into_iter().enumerate() {
            let row = k * n_sensors..(k + 1) * n_sensors;
            samples.push(Sample {
                scene: Scene { config: m.field.clone(), sensors: m.layout.clone(), transmitters },
                readings: readings[row.clone()].iter().map(|&r| r as f64).collect(),
                intruder_readings: intruder[row].iter().map(|&r| r as f64).collect(),
            });
        }
    }
    Ok((m, samples))
}

/// Reads back label images of one shard, `[count, grid * grid]` flattened.
pub fn load_labels(dir: &Path, m: &DatasetManifest, shard: usize) -> anyhow::Result<Vec<f32>> {
    let s = &m.shards[shard];
    read_f32(&dir.join(&s.labels), s.count as usize * m.field.grid_size * m.field.grid_size)
}

pub fn layouts_disjoint(a: &SensorLayout, b: &SensorLayout) -> bool {
    let set: std::collections::HashSet<usize> = a.cells.iter().copied().collect();
    b.cells.iter().all(|c| !set.contains(c))
}

/// Directory names used under a generated dataset root.
pub fn train_dir(root: &Path) -> PathBuf {
    root.join("train")
}

pub fn val_dir(root: &Path) -> PathBuf {
    root.join("val")
}

pub fn test_dir(root: &Path, cell: Option<&SweepCell>) -> PathBuf {
    match cell {
        None => root.join("test"),
        Some(c) => root.join(format!("test-{}-{}", c.param, c.value)),
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use log::{info, warn};
use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};
use tch::Tensor;
use txloc::data::{intruder_batch, label_batch, sensor_batch, subtract_input_batch};
use txloc::detection::Detection;
use txloc::eval::{score_sample, SampleScore};
use txloc::models::{load_checkpoint, meta_path, save_checkpoint, CheckpointMeta};
use txloc::models::TrainReport;
use txloc::pipeline::{
    correction_records, locations, train_detector, train_image_net, train_predpower, translate_all, DetectorSet, PowerSet,
};
use txloc::power::{apply_correction, estimate_raw_powers, fit_correction};
use txloc::rng::{LAYOUT, SHUFFLE, WEIGHTS};
use txloc::{
    CorrectionModel, Count, Detector, FieldConfig, EvalReport, Localizer, Network, PredPower, Sample, SeedTree, Sen2Peak, SensorImage,
    SensorLayout, SubtractNet, Variant,
};

use crate::config::{ExperimentConfig, ModelKind, SweepAxis};
use crate::dataset::{
    layouts_disjoint, load_split, read_manifest, test_dir, train_dir, val_dir, write_split, DatasetManifest, SplitSpec,
    SweepCell,
};

pub const WEIGHTS_EXT: &str = "safetensors";
pub const CORRECTION_FILE: &str = "correction.json";
const CHUNK: usize = 64;

pub fn sweep_cells(cfg: &ExperimentConfig, axis: SweepAxis) -> Vec<SweepCell> {
    let values: Vec<f64> = match axis {
        SweepAxis::NumTx => cfg.sweep.num_tx.iter().map(|&n| n as f64).collect(),
        SweepAxis::Density => cfg.sweep.density.clone(),
    };
    values
        .into_iter()
        .map(|value| SweepCell { param: axis.name().to_string(), value })
        .collect()
}

/// Sensor layout at `density` using only cells that `exclude` leaves free.
fn layout_avoiding(
    grid: usize,
    density: f64,
    exclude: &SensorLayout,
    rng: &mut impl rand::Rng,
) -> anyhow::Result<SensorLayout> {
    let taken: std::collections::HashSet<usize> = exclude.cells.iter().copied().collect();
    let free: Vec<usize> = (0..grid * grid).filter(|c| !taken.contains(c)).collect();
    let k = (density * (grid * grid) as f64).round() as usize;
    ensure!(
        k <= free.len(),
        txloc::Error::Config(format!("density {density} needs {k} cells but only {} are free", free.len()))
    );
    let cells = sample_indices(rng, free.len(), k).into_iter().map(|i| free[i]).collect();
    Ok(SensorLayout::new(grid, cells)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub splits: Vec<(String, u64, String)>,
}

/// Writes `train/`, `val/` and either `test/` or one `test-<axis>-<value>/`
/// per sweep cell under `out`. Train and validation share one layout; every
/// test layout is disjoint from it.
pub fn cmd_generate(cfg: &ExperimentConfig, sweep: Option<SweepAxis>, out: &Path) -> anyhow::Result<GenerateSummary> {
    cfg.validate()?;
    let seeds = SeedTree::new(cfg.seed);
    let (train_layout, test_layout) =
        txloc::scene::disjoint_sensor_split(&cfg.field, &mut seeds.stream(LAYOUT, 0))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("experiment.json"), serde_json::to_string_pretty(cfg)?)?;

    let mut summary = GenerateSummary { splits: Vec::new() };
    let mut emit = |dir: PathBuf, spec: SplitSpec| -> anyhow::Result<()> {
        let m = write_split(&dir, &spec)?;
        info!("wrote {} samples to {}", m.num_samples, dir.display());
        summary.splits.push((dir.display().to_string(), m.num_samples, m.layout_fingerprint));
        Ok(())
    };
    let mut cells: Vec<(PathBuf, &str, FieldConfig, SensorLayout, SeedTree, u64, Option<SweepCell>)> = vec![
        (train_dir(out), "train", cfg.field.clone(), train_layout.clone(), seeds.child("train", 0), cfg.samples.train, None),
        (val_dir(out), "val", cfg.field.clone(), train_layout.clone(), seeds.child("val", 0), cfg.samples.val, None),
    ];
    match sweep {
        None => cells.push((test_dir(out, None), "test", cfg.field.clone(), test_layout, seeds.child("test", 0), cfg.samples.test, None)),
        Some(axis) => {
            for (i, cell) in sweep_cells(cfg, axis).into_iter().enumerate() {
                let i = i as u64 + 1;
                let mut field = cfg.field.clone();
                let layout = match axis {
                    SweepAxis::NumTx => {
                        field.num_intruders = Count::Fixed(cell.value as usize);
                        test_layout.clone()
                    }
                    SweepAxis::Density => {
                        field.sensor_density = cell.value;
                        layout_avoiding(field.grid_size, cell.value, &train_layout, &mut seeds.stream(LAYOUT, i))?
                    }
                };
                let dir = test_dir(out, Some(&cell));
                cells.push((dir, "test", field, layout, seeds.child("test", i), cfg.samples.test, Some(cell)));
            }
        }
    }
    for (dir, split, field, layout, seeds, num_samples, sweep) in cells {
        if num_samples == 0 && split == "val" {
            continue;
        }
        let spec = SplitSpec {
            split,
            field: &field,
            env: &cfg.propagation,
            peak: &cfg.peak,
            layout: &layout,
            seeds,
            num_samples,
            sweep,
        };
        emit(dir, spec)?;
    }
    Ok(summary)
}

/// Models loaded from checkpoint files or directories.
#[derive(Default)]
pub struct Checkpoints {
    pub sen2peak: Option<Sen2Peak>,
    pub detector: Option<Detector>,
    pub subtractnet: Option<SubtractNet>,
    pub predpower: Option<PredPower>,
    pub correction: Option<CorrectionModel>,
    pub metas: Vec<CheckpointMeta>,
}

impl Checkpoints {
    /// Later paths override earlier ones for the same architecture, so a
    /// run directory can be combined with a single file from another run.
    pub fn load(paths: &[PathBuf]) -> anyhow::Result<Self> {
        let mut files = Vec::new();
        for p in paths {
            if p.is_dir() {
                let mut entries: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
                entries.sort();
                files.extend(entries.into_iter().filter(|f| {
                    f.extension().is_some_and(|e| e == WEIGHTS_EXT) || f.file_name().is_some_and(|n| n == CORRECTION_FILE)
                }));
            } else if p.exists() {
                files.push(p.clone());
            } else {
                bail!(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("checkpoint {} does not exist", p.display())
                ));
            }
        }
        let mut out = Checkpoints::default();
        for f in files {
            if f.file_name().is_some_and(|n| n == CORRECTION_FILE) {
                let model: CorrectionModel = serde_json::from_slice(&fs::read(&f)?)
                    .with_context(|| format!("parsing correction model {}", f.display()))?;
                model.validate()?;
                out.correction = Some(model);
                continue;
            }
            let meta: CheckpointMeta = serde_json::from_slice(
                &fs::read(meta_path(&f)).with_context(|| format!("missing metadata for {}", f.display()))?,
            )?;
            let kind = ModelKind::from_architecture(&meta.architecture)
                .ok_or_else(|| txloc::Error::Config(format!("unknown architecture {}", meta.architecture)))?;
            match kind {
                ModelKind::Sen2peak => out.sen2peak = Some(load_net(Sen2Peak::new(0), &f)?),
                ModelKind::Detector => out.detector = Some(load_net(Detector::new(0), &f)?),
                ModelKind::Subtractnet => out.subtractnet = Some(load_net(SubtractNet::new(0), &f)?),
                ModelKind::Predpower => out.predpower = Some(load_net(PredPower::new(0), &f)?),
            }
            info!("loaded {} from {}", meta.architecture, f.display());
            out.metas.push(meta);
        }
        Ok(out)
    }
}

fn load_net<N: Network>(mut net: N, path: &Path) -> anyhow::Result<N> {
    load_checkpoint(&mut net, path).with_context(|| format!("loading {}", path.display()))?;
    Ok(net)
}

/// Samples as seen downstream of SubtractNet: readings are intruder-only.
fn intruder_view(samples: &[Sample]) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| Sample { readings: s.intruder_readings.clone(), ..s.clone() })
        .collect()
}

fn write_loss_curve(path: &Path, report: &TrainReport) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for (e, t) in report.train_loss.iter().enumerate() {
        let v = report.val_loss.get(e).map(|v| v.to_string()).unwrap_or_default();
        w.write_record([(e + 1).to_string(), t.to_string(), v])?;
    }
    w.flush()?;
    Ok(())
}

fn save(net: &dyn Network, kind: ModelKind, cfg: &txloc::TrainConfig, report: &TrainReport, fingerprint: &str, out: &Path) -> anyhow::Result<PathBuf> {
    let path = out.join(format!("{}.{WEIGHTS_EXT}", kind.architecture()));
    let meta = CheckpointMeta::new(kind.architecture(), cfg, report.best_epoch, report.best_val_loss, fingerprint);
    save_checkpoint(net, &path, &meta)?;
    write_loss_curve(&out.join(format!("{}.loss.csv", kind.architecture())), report)?;
    info!("{} -> {} (best epoch {}, loss {:.5})", kind.architecture(), path.display(), report.best_epoch, report.best_val_loss);
    Ok(path)
}

/// Weight-init seed and a train config whose shuffle seed both derive from
/// the experiment root seed.
fn seeded(cfg: &ExperimentConfig, kind: ModelKind) -> (u64, txloc::TrainConfig) {
    let tree = SeedTree::new(cfg.seed).child(kind.architecture(), 0);
    let mut train = cfg.train.get(kind).clone();
    train.seed = tree.seed(SHUFFLE, train.seed);
    (tree.seed(WEIGHTS, 0), train)
}

fn load_train_val(root: &Path) -> anyhow::Result<(DatasetManifest, Vec<Sample>, Vec<Sample>)> {
    let (m, train) = load_split(&train_dir(root))?;
    ensure!(!train.is_empty(), txloc::Error::EmptyDataset);
    let val = if val_dir(root).join(crate::dataset::MANIFEST).exists() {
        load_split(&val_dir(root))?.1
    } else {
        Vec::new()
    };
    Ok((m, train, val))
}

/// Trains the requested models on `root/train` (validating on `root/val`
/// when present). The detector learns from the outputs of the sen2peak
/// trained in the same call, or else of the one given in `checkpoints`,
/// so step 1 and step 2 can come from different datasets.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    root: &Path,
    models: &[ModelKind],
    checkpoints: &[PathBuf],
    out: &Path,
) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let (manifest, train, val) = load_train_val(root)?;
    let fingerprint = manifest.layout_fingerprint.clone();
    let floor = manifest.propagation.noise_floor;
    let peak = manifest.peak;
    let mut loaded = Checkpoints::load(checkpoints)?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let authorized = manifest.field.num_authorized > 0;
    let (itrain, ival) = if authorized { (intruder_view(&train), intruder_view(&val)) } else { (train.clone(), val.clone()) };

    let order = [ModelKind::Subtractnet, ModelKind::Sen2peak, ModelKind::Detector, ModelKind::Predpower];
    for kind in order.into_iter().filter(|k| models.contains(k)) {
        let (weights_seed, tc) = seeded(cfg, kind);
        match kind {
            ModelKind::Subtractnet => {
                let net = SubtractNet::new(weights_seed);
                let r = train_image_net(
                    &net,
                    &train,
                    &val,
                    &|b| subtract_input_batch(b.iter().copied(), floor, &peak),
                    &|b| intruder_batch(b.iter().copied(), floor),
                    &tc,
                )?;
                written.push(save(&net, kind, &tc, &r, &fingerprint, out)?);
                loaded.subtractnet = Some(net);
            }
            ModelKind::Sen2peak => {
                let net = Sen2Peak::new(weights_seed);
                let r = train_image_net(
                    &net,
                    &itrain,
                    &ival,
                    &|b| sensor_batch(b.iter().copied(), floor),
                    &|b| label_batch(b.iter().copied(), &peak),
                    &tc,
                )?;
                written.push(save(&net, kind, &tc, &r, &fingerprint, out)?);
                loaded.sen2peak = Some(net);
            }
            ModelKind::Detector => {
                let s2p = loaded
                    .sen2peak
                    .as_ref()
                    .ok_or_else(|| txloc::Error::Config("detector training needs a sen2peak checkpoint".into()))?;
                let inputs = |b: &[&Sample]| sensor_batch(b.iter().copied(), floor);
                let set = |s: &[Sample]| -> anyhow::Result<DetectorSet> {
                    Ok(DetectorSet::new(translate_all(s2p, s, &inputs, CHUNK)?, s.iter().map(Sample::boxes).collect())?)
                };
                let dtrain = set(&itrain)?;
                let dval = if ival.is_empty() { DetectorSet::new(Tensor::zeros([0, 1, 100, 100], tch::kind::FLOAT_CPU), vec![])? } else { set(&ival)? };
                let det = Detector::new(weights_seed);
                let r = train_detector(&det, &dtrain, &dval, &tc)?;
                written.push(save(&det, kind, &tc, &r, &fingerprint, out)?);
                loaded.detector = Some(det);
            }
            ModelKind::Predpower => {
                let rule = &cfg.correction.isolation;
                let ptrain = PowerSet::isolated(&itrain, floor, rule)?;
                let pval = match PowerSet::isolated(&ival, floor, rule) {
                    Ok(p) => p,
                    Err(txloc::Error::EmptyDataset) => PowerSet { crops: Tensor::zeros([0, 1, 21, 21], tch::kind::FLOAT_CPU), powers: vec![] },
                    Err(e) => return Err(e.into()),
                };
                info!("predpower: {} isolated training crops", ptrain.len());
                let net = PredPower::new(weights_seed);
                let r = train_predpower(&net, &ptrain, &pval, &tc)?;
                written.push(save(&net, kind, &tc, &r, &fingerprint, out)?);
                loaded.predpower = Some(net);
            }
        }
    }
    Ok(written)
}

/// Per-sample images fed to the translation network: SubtractNet output
/// when the scenes hold authorized users and a SubtractNet is available.
fn pipeline_inputs(ck: &Checkpoints, samples: &[Sample], manifest: &DatasetManifest) -> anyhow::Result<Tensor> {
    let floor = manifest.propagation.noise_floor;
    let chunks = samples
        .chunks(CHUNK)
        .map(|c| -> anyhow::Result<Tensor> {
            Ok(match (&ck.subtractnet, manifest.field.num_authorized > 0) {
                (Some(sub), true) => sub.forward(&subtract_input_batch(c, floor, &manifest.peak)?),
                (None, true) => {
                    warn!("scenes include authorized users but no subtractnet checkpoint was given");
                    sensor_batch(c, floor)?
                }
                _ => sensor_batch(c, floor)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Tensor::cat(&chunks, 0))
}

fn tensor_image(images: &Tensor, k: usize) -> anyhow::Result<SensorImage> {
    let img = images.get(k as i64).get(0).contiguous();
    let (h, w) = (img.size()[0] as usize, img.size()[1] as usize);
    let data = Vec::<f32>::try_from(img.flatten(0, -1))?;
    Ok(SensorImage(Array2::from_shape_vec((h, w), data)?))
}

struct Localized {
    detections: Vec<Vec<Detection>>,
    /// Raw PredPower estimates, when a PredPower is loaded.
    raw_powers: Option<Vec<Vec<f64>>>,
    latency_s: f64,
}

fn run_pipeline(
    cfg: &ExperimentConfig,
    ck: &Checkpoints,
    variant: Variant,
    samples: &[Sample],
    manifest: &DatasetManifest,
) -> anyhow::Result<Localized> {
    let s2p = ck
        .sen2peak
        .as_ref()
        .ok_or_else(|| txloc::Error::Config("localization needs a sen2peak checkpoint".into()))?;
    let mut loc = Localizer::new(s2p, ck.detector.as_ref(), variant);
    loc.thresholds = cfg.thresholds;
    let start = std::time::Instant::now();
    let images = pipeline_inputs(ck, samples, manifest)?;
    let mut detections = Vec::with_capacity(samples.len());
    for k in (0..samples.len()).step_by(CHUNK) {
        let n = CHUNK.min(samples.len() - k);
        detections.extend(loc.localize_batch(&images.narrow(0, k as i64, n as i64))?);
    }
    let raw_powers = match &ck.predpower {
        Some(net) => Some(
            detections
                .iter()
                .enumerate()
                .map(|(k, d)| -> anyhow::Result<Vec<f64>> { Ok(estimate_raw_powers(&tensor_image(&images, k)?, &locations(d), net)?) })
                .collect::<anyhow::Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let latency_s = start.elapsed().as_secs_f64() / samples.len().max(1) as f64;
    Ok(Localized { detections, raw_powers, latency_s })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub records: usize,
    #[serde(rename = "M")]
    pub max_neighbors: usize,
    pub path: String,
}

/// Fits the neighbor correction on localized training samples and writes
/// `correction.json` to `out`. With `oracle` the true locations stand in
/// for the localizer output.
pub fn cmd_power_fit(
    cfg: &ExperimentConfig,
    root: &Path,
    checkpoints: &[PathBuf],
    variant: Variant,
    oracle: bool,
    out: &Path,
) -> anyhow::Result<CorrectionSummary> {
    cfg.validate()?;
    let ck = Checkpoints::load(checkpoints)?;
    let net = ck
        .predpower
        .as_ref()
        .ok_or_else(|| txloc::Error::Config("power-fit needs a predpower checkpoint".into()))?;
    let (manifest, train) = load_split(&train_dir(root))?;
    let (detections, raw) = if oracle {
        let detections: Vec<Vec<Detection>> = train
            .iter()
            .map(|s| s.intruder_locations().into_iter().map(|p| Detection { x: p.x, y: p.y, confidence: 1.0 }).collect())
            .collect();
        let images = pipeline_inputs(&ck, &train, &manifest)?;
        let raw = detections
            .iter()
            .enumerate()
            .map(|(k, d)| -> anyhow::Result<Vec<f64>> { Ok(estimate_raw_powers(&tensor_image(&images, k)?, &locations(d), net)?) })
            .collect::<anyhow::Result<Vec<_>>>()?;
        (detections, raw)
    } else {
        let run = run_pipeline(cfg, &ck, variant, &train, &manifest)?;
        (run.detections, run.raw_powers.expect("predpower is loaded"))
    };
    let rule = &cfg.correction.isolation;
    let records = correction_records(&train, &detections, &raw, rule, cfg.eval.threshold_px);
    if records.is_empty() {
        return Err(anyhow::Error::from(txloc::Error::EmptyDataset)
            .context("no non-isolated detection matched a transmitter; nothing to fit"));
    }
    let model = fit_correction(&records, cfg.correction.alpha, rule.neighbor_radius)?;
    fs::create_dir_all(out)?;
    let path = out.join(CORRECTION_FILE);
    fs::write(&path, serde_json::to_string_pretty(&model)?)?;
    info!("correction fitted on {} records (M = {})", records.len(), model.max_neighbors);
    Ok(CorrectionSummary { records: records.len(), max_neighbors: model.max_neighbors, path: path.display().to_string() })
}

/// One line of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub sweep_param: String,
    pub value: f64,
    #[serde(rename = "L_err")]
    pub l_err: Option<f64>,
    #[serde(rename = "M_r")]
    pub miss_rate: f64,
    #[serde(rename = "F_r")]
    pub false_alarm_rate: f64,
    #[serde(rename = "P_err")]
    pub p_err: Option<f64>,
    pub n: usize,
    pub latency_s: f64,
}

impl ReportRow {
    fn new(variant: &str, cell: Option<&SweepCell>, r: &EvalReport) -> Self {
        Self {
            variant: variant.to_string(),
            sweep_param: cell.map(|c| c.param.clone()).unwrap_or_else(|| "none".into()),
            value: cell.map(|c| c.value).unwrap_or(0.0),
            l_err: r.l_err,
            miss_rate: r.miss_rate,
            false_alarm_rate: r.false_alarm_rate,
            p_err: r.p_err,
            n: r.n,
            latency_s: r.latency_s,
        }
    }
}

/// One line of a per-sample dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRow {
    pub sample: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    /// Mean matched distance, meters.
    pub l_err: Option<f64>,
    pub miss_rate: f64,
    pub false_alarm_rate: f64,
    pub p_err: Option<f64>,
    /// Matched distances in meters, `;`-separated.
    pub distances: String,
}

impl DumpRow {
    fn new(sample: usize, s: &SampleScore) -> Self {
        Self {
            sample,
            n_gt: s.n_gt,
            n_pred: s.n_pred,
            l_err: s.l_err,
            miss_rate: s.miss_rate,
            false_alarm_rate: s.false_alarm_rate,
            p_err: s.p_err,
            distances: s.distances.iter().map(|d| format!("{d:.6}")).collect::<Vec<_>>().join(";"),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalOutput {
    pub rows: Vec<ReportRow>,
    pub dumps: Vec<String>,
}

pub struct EvalOptions {
    pub variants: Vec<Variant>,
    pub sweep: Option<SweepAxis>,
    /// Ground truth passed straight through as predictions.
    pub oracle: bool,
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Detector => "detector",
        Variant::SimplePeak => "simplepeak",
    }
}

/// Evaluates every requested variant on every test cell under `root`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    root: &Path,
    checkpoints: &[PathBuf],
    opts: &EvalOptions,
    out: &Path,
) -> anyhow::Result<EvalOutput> {
    cfg.validate()?;
    let ck = if opts.oracle { Checkpoints::default() } else { Checkpoints::load(checkpoints)? };
    let cells: Vec<Option<SweepCell>> = match opts.sweep {
        None => vec![None],
        Some(axis) => sweep_cells(cfg, axis).into_iter().map(Some).collect(),
    };
    let train_layout = read_manifest(&train_dir(root)).ok().map(|m| m.layout);
    fs::create_dir_all(out)?;
    let mut result = EvalOutput::default();
    for cell in &cells {
        let dir = test_dir(root, cell.as_ref());
        let (manifest, test) = load_split(&dir)?;
        ensure!(!test.is_empty(), txloc::Error::EmptyDataset);
        if let Some(tl) = &train_layout {
            ensure!(
                layouts_disjoint(tl, &manifest.layout),
                txloc::Error::Config(format!("test layout in {} overlaps the training layout", dir.display()))
            );
        }
        let tag = cell.as_ref().map(|c| format!("{}-{}", c.param, c.value)).unwrap_or_else(|| "all".into());
        let runs: Vec<(&str, Vec<SampleScore>)> = if opts.oracle {
            let scores = test
                .iter()
                .map(|s| {
                    let (l, p) = (s.intruder_locations(), s.intruder_powers());
                    score_sample(&l, Some(&p), &l, Some(&p), &cfg.eval)
                })
                .collect();
            vec![("oracle", scores)]
        } else {
            opts.variants
                .iter()
                .map(|&v| -> anyhow::Result<(&str, Vec<SampleScore>)> {
                    let run = run_pipeline(cfg, &ck, v, &test, &manifest)?;
                    let rule = &cfg.correction.isolation;
                    let scores = test
                        .iter()
                        .enumerate()
                        .map(|(k, s)| {
                            let locs = locations(&run.detections[k]);
                            let powers = run
                                .raw_powers
                                .as_ref()
                                .map(|raw| apply_correction(&locs, &raw[k], ck.correction.as_ref(), rule));
                            let truth = s.intruder_powers();
                            let mut sc = score_sample(&s.intruder_locations(), Some(&truth), &locs, powers.as_deref(), &cfg.eval);
                            sc.latency_s = run.latency_s;
                            sc
                        })
                        .collect();
                    Ok((variant_name(v), scores))
                })
                .collect::<anyhow::Result<_>>()?
        };
        for (name, scores) in runs {
            let report = EvalReport::aggregate(&scores);
            info!("{name} on {tag}: {report:?}");
            result.rows.push(ReportRow::new(name, cell.as_ref(), &report));
            let dump = out.join(format!("errors-{name}-{tag}.csv"));
            let mut w = csv::Writer::from_path(&dump)?;
            for (k, s) in scores.iter().enumerate() {
                w.serialize(DumpRow::new(k, s))?;
            }
            w.flush()?;
            result.dumps.push(dump.display().to_string());
        }
    }
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    for row in &result.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&result.rows)?)?;
    Ok(result)
}

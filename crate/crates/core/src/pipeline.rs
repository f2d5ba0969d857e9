//! Training drivers that connect samples, networks and the shared loop.

use std::time::Instant;

use tch::{Kind, Tensor};

use crate::data::{intruder_batch, label_batch, sensor_batch, subtract_input_batch, Sample};
use crate::detection::{Detection, Localizer};
use crate::encoding::{PeakSpec, POWER_PATCH};
use crate::eval::greedy_match;
use crate::models::{detector_loss, fit, Detector, GroundTruthBox, Network, PredPower, Split, TrainConfig, TrainReport};
use crate::power::{classify_isolated, collect_records, estimate_raw_powers, power_crops, CorrectionRecord, IsolationRule};
use crate::scene::Point;
use crate::{Error, Result};

type BatchFn<'a> = &'a dyn Fn(&[&Sample]) -> Result<Tensor>;

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

fn rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let idx: Vec<i64> = idx.iter().map(|&i| i as i64).collect();
    t.index_select(0, &Tensor::from_slice(&idx))
}

/// Pixel-wise MSE training of an image-to-image network.
pub fn train_image_net(
    net: &dyn Network,
    train: &[Sample],
    val: &[Sample],
    inputs: BatchFn,
    targets: BatchFn,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    fit(net.var_store(), train.len(), val.len(), cfg, |split, idx, is_train| {
        let set = match split {
            Split::Train => train,
            Split::Validation => val,
        };
        let batch = pick(set, idx);
        let x = inputs(&batch)?;
        net.check_input(&x)?;
        let y = targets(&batch)?;
        Ok(net.forward_t(&x, is_train).mse_loss(&y, tch::Reduction::Mean))
    })
}

/// Readings image to Gaussian-peak image.
pub fn train_sen2peak(
    net: &dyn Network,
    train: &[Sample],
    val: &[Sample],
    noise_floor: f64,
    peak: &PeakSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_image_net(
        net,
        train,
        val,
        &|b| sensor_batch(b.iter().copied(), noise_floor),
        &|b| label_batch(b.iter().copied(), peak),
        cfg,
    )
}

/// Readings plus authorized channel to intruders-only readings.
pub fn train_subtractnet(
    net: &dyn Network,
    train: &[Sample],
    val: &[Sample],
    noise_floor: f64,
    peak: &PeakSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_image_net(
        net,
        train,
        val,
        &|b| subtract_input_batch(b.iter().copied(), noise_floor, peak),
        &|b| intruder_batch(b.iter().copied(), noise_floor),
        cfg,
    )
}

/// Runs `net` over all samples in chunks, concatenating the outputs.
pub fn translate_all(net: &dyn Network, samples: &[Sample], inputs: BatchFn, chunk: usize) -> Result<Tensor> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outs = samples
        .chunks(chunk.max(1))
        .map(|c| {
            let refs: Vec<&Sample> = c.iter().collect();
            Ok(net.forward(&inputs(&refs)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&outs, 0))
}

/// Peak images with their boxes, as seen by the detector.
pub struct DetectorSet {
    /// `[N, 1, 100, 100]`
    pub images: Tensor,
    pub boxes: Vec<Vec<GroundTruthBox>>,
}

impl DetectorSet {
    pub fn new(images: Tensor, boxes: Vec<Vec<GroundTruthBox>>) -> Result<Self> {
        if images.size()[0] as usize != boxes.len() {
            return Err(Error::shape(boxes.len(), images.size()));
        }
        Ok(Self { images, boxes })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn train_detector(det: &Detector, train: &DetectorSet, val: &DetectorSet, cfg: &TrainConfig) -> Result<TrainReport> {
    fit(det.var_store(), train.len(), val.len(), cfg, |split, idx, is_train| {
        let set = match split {
            Split::Train => train,
            Split::Validation => val,
        };
        let x = det.preprocess(&rows(&set.images, idx));
        let boxes: Vec<Vec<GroundTruthBox>> = idx.iter().map(|&i| set.boxes[i].clone()).collect();
        Ok(detector_loss(&det.forward_t(&x, is_train), &boxes, det.head_spec()))
    })
}

/// 21x21 crops with the power of the transmitter each is centered on.
pub struct PowerSet {
    /// `[N, 1, 21, 21]`
    pub crops: Tensor,
    /// dBm
    pub powers: Vec<f32>,
}

impl PowerSet {
    /// One crop per intruder, centered on its true location.
    pub fn from_samples(samples: &[Sample], noise_floor: f64) -> Result<Self> {
        Self::collect(samples, noise_floor, |locs| vec![true; locs.len()])
    }

    /// Like [`PowerSet::from_samples`] but keeps only intruders that are
    /// isolated under `rule`.
    pub fn isolated(samples: &[Sample], noise_floor: f64, rule: &IsolationRule) -> Result<Self> {
        Self::collect(samples, noise_floor, |locs| classify_isolated(locs, rule))
    }

    fn collect(samples: &[Sample], noise_floor: f64, keep: impl Fn(&[Point]) -> Vec<bool>) -> Result<Self> {
        let mut crops = Vec::new();
        let mut powers = Vec::new();
        for s in samples {
            let all = s.intruder_locations();
            let mask = keep(&all);
            let (locs, p): (Vec<Point>, Vec<f32>) = all
                .into_iter()
                .zip(s.intruder_powers())
                .zip(mask)
                .filter(|(_, k)| *k)
                .map(|((l, p), _)| (l, p as f32))
                .unzip();
            if locs.is_empty() {
                continue;
            }
            crops.push(power_crops(&s.sensor_image(noise_floor), &locs));
            powers.extend(p);
        }
        if powers.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let crops = Tensor::cat(&crops, 0);
        debug_assert_eq!(crops.size(), vec![powers.len() as i64, 1, POWER_PATCH as i64, POWER_PATCH as i64]);
        Ok(Self { crops, powers })
    }

    pub fn len(&self) -> usize {
        self.powers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.powers.is_empty()
    }
}

pub fn train_predpower(net: &PredPower, train: &PowerSet, val: &PowerSet, cfg: &TrainConfig) -> Result<TrainReport> {
    let targets = |set: &PowerSet, idx: &[usize]| {
        let v: Vec<f32> = idx.iter().map(|&i| set.powers[i]).collect();
        Tensor::from_slice(&v)
    };
    fit(net.var_store(), train.len(), val.len(), cfg, |split, idx, is_train| {
        let set = match split {
            Split::Train => train,
            Split::Validation => val,
        };
        let pred = net.forward_t(&rows(&set.crops, idx), is_train);
        Ok(pred.mse_loss(&targets(set, idx), tch::Reduction::Mean))
    })
}

/// Detections per sample plus the mean wall time per sample, seconds.
pub fn localize_samples(loc: &Localizer, samples: &[Sample], noise_floor: f64, chunk: usize) -> Result<(Vec<Vec<Detection>>, f64)> {
    let start = Instant::now();
    let mut out = Vec::with_capacity(samples.len());
    for c in samples.chunks(chunk.max(1)) {
        out.extend(loc.localize_batch(&sensor_batch(c, noise_floor)?)?);
    }
    let latency = start.elapsed().as_secs_f64() / samples.len().max(1) as f64;
    Ok((out, latency))
}

pub fn locations(detections: &[Detection]) -> Vec<Point> {
    detections.iter().map(Detection::location).collect()
}

/// Uncorrected power estimate for every detection of every sample.
pub fn raw_powers(samples: &[Sample], detections: &[Vec<Detection>], net: &PredPower, noise_floor: f64) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .zip(detections)
        .map(|(s, d)| estimate_raw_powers(&s.sensor_image(noise_floor), &locations(d), net))
        .collect()
}

/// Correction training records from localized samples: each non-isolated
/// detection matched to a true transmitter within `threshold_px` yields one
/// record.
pub fn correction_records(
    samples: &[Sample],
    detections: &[Vec<Detection>],
    raw: &[Vec<f64>],
    rule: &IsolationRule,
    threshold_px: f64,
) -> Vec<CorrectionRecord> {
    let mut records = Vec::new();
    for ((s, d), p) in samples.iter().zip(detections).zip(raw) {
        let locs = locations(d);
        let m = greedy_match(&s.intruder_locations(), &locs, threshold_px);
        let powers = s.intruder_powers();
        let mut truth = vec![None; locs.len()];
        for &(g, j, _) in &m.pairs {
            truth[j] = Some(powers[g]);
        }
        let estimates: Vec<(Point, f64)> = locs.into_iter().zip(p.iter().copied()).collect();
        records.extend(collect_records(&estimates, &truth, rule));
    }
    records
}

/// Mean squared error of `pred` against `target` over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> f64 {
    pred.to_kind(Kind::Double)
        .mse_loss(&target.to_kind(Kind::Double), tch::Reduction::Mean)
        .double_value(&[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_samples;
    use crate::models::{Sen2Peak, SubtractNet};
    use crate::propagation::RadioEnvironment;
    use crate::rng::SeedTree;
    use crate::scene::{Count, FieldConfig, SensorLayout};

    fn samples(n: u64, num_authorized: usize, intruders: Count) -> Vec<Sample> {
        let field = FieldConfig {
            num_intruders: intruders,
            num_authorized,
            ..Default::default()
        };
        let layout = SensorLayout::sample(&field, &mut SeedTree::new(1).stream("layout", 0)).unwrap();
        generate_samples(&RadioEnvironment::default(), &field, &layout, &SeedTree::new(2), 0..n).unwrap()
    }

    fn long(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            learning_rate: lr,
            batch_size: 1,
            ..Default::default()
        }
    }

    #[test]
    fn sen2peak_overfits_one_sample() {
        let data = samples(1, 0, Count::Fixed(3));
        let net = Sen2Peak::new(0);
        let r = train_sen2peak(&net, &data, &[], -80.0, &PeakSpec::default(), &long(300, 3e-3)).unwrap();
        let first = r.train_loss[0];
        assert!(r.best_val_loss < 0.01 * first, "{first} -> {}", r.best_val_loss);
    }

    #[test]
    fn subtractnet_loss_decreases() {
        let data = samples(1, 2, Count::Fixed(2));
        let net = SubtractNet::new(0);
        let r = train_subtractnet(&net, &data, &[], -80.0, &PeakSpec::default(), &long(20, 1e-3)).unwrap();
        assert!(r.train_loss.last().unwrap() < &r.train_loss[0]);
    }

    #[test]
    fn predpower_overfits_one_crop() {
        let data = samples(1, 0, Count::Fixed(1));
        let set = PowerSet::from_samples(&data, -80.0).unwrap();
        assert_eq!(set.len(), 1);
        let crowded = samples(1, 0, Count::Fixed(10));
        let iso = PowerSet::isolated(&crowded, -80.0, &IsolationRule::default());
        let expected = classify_isolated(&crowded[0].intruder_locations(), &IsolationRule::default());
        match iso {
            Ok(set) => assert_eq!(set.len(), expected.iter().filter(|&&k| k).count()),
            Err(Error::EmptyDataset) => assert!(!expected.contains(&true)),
            Err(e) => panic!("{e}"),
        }
        let net = PredPower::new(0);
        let r = train_predpower(&net, &set, &set, &long(400, 1e-2)).unwrap();
        assert!(*r.train_loss.last().unwrap() < 1e-8, "{:?}", r.train_loss);
        // eval mode uses running batch-norm statistics, which on one sample
        // only approach the batch statistics
        let pred = net.forward(&set.crops).double_value(&[0]);
        assert!((pred - set.powers[0] as f64).abs() < 0.05, "{pred} vs {}", set.powers[0]);
    }

    #[test]
    fn detector_recalls_its_single_image() {
        let data = samples(1, 0, Count::Fixed(2));
        let spec = PeakSpec::default();
        let set = DetectorSet::new(label_batch(&data, &spec).unwrap(), vec![data[0].boxes()]).unwrap();
        let det = Detector::new(0);
        train_detector(&det, &set, &set, &long(150, 1e-2)).unwrap();
        let head = det.forward(&det.preprocess(&set.images));
        let boxes = crate::detection::decode_boxes(&head, det.head_spec(), 0.8).unwrap().remove(0);
        let kept = crate::detection::non_max_suppression(&boxes, 0.5);
        let m = crate::eval::greedy_match(&data[0].intruder_locations(), &kept.iter().map(|b| b.center()).collect::<Vec<_>>(), 5.0);
        assert!(m.misses.is_empty(), "{kept:?}");
    }
}

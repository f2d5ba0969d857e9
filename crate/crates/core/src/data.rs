//! In-memory samples and the tensors built from them.
//!
//! A sample keeps only its scene and raw readings; images are rendered when
//! a batch is assembled, which keeps large datasets small in memory.

use ndarray::Array2;
use tch::Tensor;

use crate::encoding::{encode_authorized_channel, encode_sensor_image, render_label, PeakSpec, SensorImage};
use crate::models::GroundTruthBox;
use crate::propagation::{rss_with_shadowing, PathLoss, RadioEnvironment, ShadowTable};
use crate::rng::{SeedTree, SCENE, SHADOWING};
use crate::scene::{sample_scene_with_layout, FieldConfig, Point, Scene, SensorLayout, TxKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: Scene,
    /// dBm per sensor, layout order, all transmitters.
    pub readings: Vec<f64>,
    /// dBm per sensor from intruders only, with the same shadowing draws.
    /// Equal to `readings` when there are no authorized users.
    pub intruder_readings: Vec<f64>,
}

impl Sample {
    pub fn intruder_locations(&self) -> Vec<Point> {
        self.scene.intruders().map(|t| t.location()).collect()
    }

    pub fn intruder_powers(&self) -> Vec<f64> {
        self.scene.intruders().map(|t| t.power).collect()
    }

    pub fn sensor_image(&self, noise_floor: f64) -> SensorImage {
        encode_sensor_image(&self.readings, &self.scene.sensors, noise_floor).expect("readings match layout")
    }

    pub fn intruder_image(&self, noise_floor: f64) -> SensorImage {
        encode_sensor_image(&self.intruder_readings, &self.scene.sensors, noise_floor).expect("readings match layout")
    }

    pub fn authorized_channel(&self, noise_floor: f64, spec: &PeakSpec) -> Array2<f32> {
        let auth: Vec<_> = self.scene.authorized().copied().collect();
        encode_authorized_channel(&auth, self.scene.config.grid_size, noise_floor, spec)
    }

    pub fn label(&self, spec: &PeakSpec) -> Array2<f32> {
        render_label(&self.intruder_locations(), self.scene.config.grid_size, spec).0
    }

    pub fn boxes(&self) -> Vec<GroundTruthBox> {
        self.intruder_locations()
            .into_iter()
            .map(|p| GroundTruthBox::peak(p.x, p.y))
            .collect()
    }
}

/// Draws sample `index` over a fixed sensor layout. Scene and shadowing use
/// their own per-sample streams.
pub fn generate_sample<M: PathLoss>(
    env: &RadioEnvironment<M>,
    field: &FieldConfig,
    layout: &SensorLayout,
    seeds: &SeedTree,
    index: u64,
) -> Result<Sample> {
    let scene = sample_scene_with_layout(field, layout, &mut seeds.stream(SCENE, index))?;
    let shadow = ShadowTable::draw(
        env.model.shadow_sigma(),
        scene.transmitters.len(),
        layout.len(),
        Some(&mut seeds.stream(SHADOWING, index)),
    );
    let readings = rss_with_shadowing(env, &scene.transmitters, layout, &shadow)?;
    let n_intruders = scene.intruders().count();
    debug_assert!(scene.transmitters[..n_intruders].iter().all(|t| t.kind == TxKind::Intruder));
    let intruder_readings = if n_intruders == scene.transmitters.len() {
        readings.clone()
    } else {
        rss_with_shadowing(env, &scene.transmitters[..n_intruders], layout, &shadow.rows(0..n_intruders))?
    };
    Ok(Sample {
        scene,
        readings,
        intruder_readings,
    })
}

pub fn generate_samples<M: PathLoss>(
    env: &RadioEnvironment<M>,
    field: &FieldConfig,
    layout: &SensorLayout,
    seeds: &SeedTree,
    range: std::ops::Range<u64>,
) -> Result<Vec<Sample>> {
    range.map(|i| generate_sample(env, field, layout, seeds, i)).collect()
}

/// Stacks equally sized images into an `[N, C, H, W]` tensor, one channel
/// per closure.
pub fn image_batch<'a, I>(samples: I, channels: &[&dyn Fn(&Sample) -> Array2<f32>]) -> Result<Tensor>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let mut data = Vec::new();
    let mut n = 0i64;
    let mut side = None;
    for s in samples {
        for ch in channels {
            let img = ch(s);
            let dim = img.dim();
            if *side.get_or_insert(dim) != dim {
                return Err(Error::shape(format!("{:?}", side.unwrap()), dim));
            }
            data.extend(img.iter().copied());
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let (h, w) = side.expect("at least one image");
    Ok(Tensor::from_slice(&data).view([n, channels.len() as i64, h as i64, w as i64]))
}

/// Normalized readings of every transmitter, `[N, 1, H, W]`.
pub fn sensor_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>, noise_floor: f64) -> Result<Tensor> {
    image_batch(samples, &[&|s| s.sensor_image(noise_floor).0])
}

/// Normalized readings of intruders only, `[N, 1, H, W]`.
pub fn intruder_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>, noise_floor: f64) -> Result<Tensor> {
    image_batch(samples, &[&|s| s.intruder_image(noise_floor).0])
}

/// Readings plus authorized-user channel, `[N, 2, H, W]`.
pub fn subtract_input_batch<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    noise_floor: f64,
    spec: &PeakSpec,
) -> Result<Tensor> {
    image_batch(
        samples,
        &[&|s| s.sensor_image(noise_floor).0, &|s| s.authorized_channel(noise_floor, spec)],
    )
}

pub fn label_batch<'a>(samples: impl IntoIterator<Item = &'a Sample>, spec: &PeakSpec) -> Result<Tensor> {
    image_batch(samples, &[&|s| s.label(spec)])
}

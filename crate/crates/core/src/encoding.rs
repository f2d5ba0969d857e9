//! Conversions between physical quantities and model tensors.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Point, SensorLayout, Transmitter};

/// Side of the detector input image.
pub const DETECTOR_INPUT: usize = 416;
/// Side of the translation images the detector consumes.
pub const TRANSLATION_SIDE: usize = 100;
/// 416-space pixels per 100-space pixel.
pub const DETECTOR_SCALE: f64 = DETECTOR_INPUT as f64 / TRANSLATION_SIDE as f64;
/// Side of the power-estimation crop.
pub const POWER_PATCH: usize = 21;

/// Normalized sensor readings; zero where there is no sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorImage(pub Array2<f32>);

/// Gaussian-peak target image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage(pub Array2<f32>);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PeakSpec {
    pub amplitude: f64,
    /// Pixels.
    pub sigma: f64,
    /// Odd side of the square footprint, pixels.
    pub footprint: usize,
}

impl Default for PeakSpec {
    fn default() -> Self {
        Self {
            amplitude: 10.0,
            sigma: 0.9,
            footprint: 5,
        }
    }
}

impl PeakSpec {
    pub fn validate(&self) -> Result<()> {
        if self.footprint % 2 == 0 {
            return Err(Error::Config(format!("peak footprint {} must be odd", self.footprint)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config("peak sigma must be positive".into()));
        }
        Ok(())
    }
}

pub fn normalize_reading(reading: f64, noise_floor: f64) -> f64 {
    (reading - noise_floor) / (-noise_floor / 2.0)
}

pub fn denormalize_reading(value: f64, noise_floor: f64) -> f64 {
    value * (-noise_floor / 2.0) + noise_floor
}

/// Places each normalized reading at its sensor's cell.
pub fn encode_sensor_image(readings: &[f64], sensors: &SensorLayout, noise_floor: f64) -> Result<SensorImage> {
    if readings.len() != sensors.len() {
        return Err(Error::shape(format!("{} readings", sensors.len()), readings.len()));
    }
    let g = sensors.grid_size;
    let mut img = Array2::<f32>::zeros((g, g));
    for (&cell, &r) in sensors.cells.iter().zip(readings) {
        if !(r >= noise_floor) {
            return Err(Error::Domain(format!("reading {r} dBm below noise floor {noise_floor}")));
        }
        img[sensors.cell_rc(cell)] = normalize_reading(r, noise_floor) as f32;
    }
    Ok(SensorImage(img))
}

/// Renders Gaussian peaks `(location, amplitude)` on a `grid x grid` image.
/// Each peak covers the footprint window centered on the cell containing
/// its location; overlapping peaks combine by element-wise maximum.
pub fn render_peaks(peaks: &[(Point, f64)], grid: usize, spec: &PeakSpec) -> Array2<f32> {
    let mut img = Array2::<f32>::zeros((grid, grid));
    let half = (spec.footprint / 2) as i64;
    let two_var = 2.0 * spec.sigma * spec.sigma;
    for &(p, amplitude) in peaks {
        let (ci, cj) = p.cell();
        for i in (ci - half)..=(ci + half) {
            for j in (cj - half)..=(cj + half) {
                if i < 0 || j < 0 || i >= grid as i64 || j >= grid as i64 {
                    continue;
                }
                let u = i as f64 + 0.5;
                let v = j as f64 + 0.5;
                let d2 = (u - p.x).powi(2) + (v - p.y).powi(2);
                let value = (amplitude * (-d2 / two_var).exp()) as f32;
                let px = &mut img[(i as usize, j as usize)];
                *px = px.max(value);
            }
        }
    }
    img
}

pub fn render_label(locations: &[Point], grid: usize, spec: &PeakSpec) -> LabelImage {
    let peaks: Vec<_> = locations.iter().map(|&p| (p, spec.amplitude)).collect();
    LabelImage(render_peaks(&peaks, grid, spec))
}

/// Authorized users as peaks whose height is their normalized power.
pub fn encode_authorized_channel(
    authorized: &[Transmitter],
    grid: usize,
    noise_floor: f64,
    spec: &PeakSpec,
) -> Array2<f32> {
    let peaks: Vec<_> = authorized
        .iter()
        .map(|t| (t.location(), normalize_reading(t.power, noise_floor)))
        .collect();
    render_peaks(&peaks, grid, spec)
}

/// Channel 0: sensor readings, channel 1: authorized users.
pub fn stack_channels(sensor: &SensorImage, authorized: &Array2<f32>) -> Result<Array3<f32>> {
    if sensor.0.dim() != authorized.dim() {
        return Err(Error::shape(format!("{:?}", sensor.0.dim()), authorized.dim()));
    }
    Ok(ndarray::stack(Axis(0), &[sensor.0.view(), authorized.view()]).expect("same shape"))
}

/// Source index used by nearest-neighbor resizing from `src` to `dst`.
pub fn nearest_source_index(dst_index: usize, src: usize, dst: usize) -> usize {
    (dst_index * src) / dst
}

/// Triplicates a 100x100 image into 3 channels and resizes it to 416x416 by
/// nearest-neighbor sampling.
pub fn detector_preprocess(image: &Array2<f32>) -> Result<Array3<f32>> {
    if image.dim() != (TRANSLATION_SIDE, TRANSLATION_SIDE) {
        return Err(Error::shape("(100, 100)", image.dim()));
    }
    let resized = Array2::from_shape_fn((DETECTOR_INPUT, DETECTOR_INPUT), |(i, j)| {
        image[(
            nearest_source_index(i, TRANSLATION_SIDE, DETECTOR_INPUT),
            nearest_source_index(j, TRANSLATION_SIDE, DETECTOR_INPUT),
        )]
    });
    Ok(ndarray::stack(Axis(0), &[resized.view(), resized.view(), resized.view()]).expect("same shape"))
}

/// 21x21 crop centered on the cell containing `location`, zero padded
/// outside the field.
pub fn crop_power_patch(image: &SensorImage, location: Point) -> Array2<f32> {
    let (rows, cols) = image.0.dim();
    let half = (POWER_PATCH / 2) as i64;
    let (ci, cj) = location.cell();
    let mut patch = Array2::<f32>::zeros((POWER_PATCH, POWER_PATCH));
    let r0 = (ci - half).max(0);
    let r1 = (ci + half).min(rows as i64 - 1);
    let c0 = (cj - half).max(0);
    let c1 = (cj + half).min(cols as i64 - 1);
    if r0 > r1 || c0 > c1 {
        return patch;
    }
    let src = image.0.slice(s![r0 as usize..=r1 as usize, c0 as usize..=c1 as usize]);
    let pr = (r0 - (ci - half)) as usize;
    let pc = (c0 - (cj - half)) as usize;
    patch
        .slice_mut(s![pr..pr + src.nrows(), pc..pc + src.ncols()])
        .assign(&src);
    patch
}

/// A small physical testbed grid with sensors on some of its cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedGrid {
    pub grid_size: usize,
    /// Meters per cell side.
    pub cell_size: f64,
    /// (row, col) cells hosting a sensor.
    pub sensors: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedLayout {
    pub sensors: SensorLayout,
    /// Meters per cell in the upsampled grid.
    pub pixel_size: f64,
    /// Sensor cells of the 20x20 tile before replication.
    pub tile_sensors: Vec<(usize, usize)>,
    /// Cells where transmitters may be placed.
    pub candidate_tx_cells: Vec<usize>,
}

impl TestbedLayout {
    pub fn sensor_density(&self) -> f64 {
        let g = self.sensors.grid_size;
        self.sensors.len() as f64 / (g * g) as f64
    }
}

const TESTBED_SIDE: usize = 10;
const TILE_SIDE: usize = 2 * TESTBED_SIDE;
const TILE_REPEAT: usize = 5;
const TILE_MARGIN: usize = 5;

/// Maps a 10x10 testbed onto a 100x100 grid: every cell is split 2x2 with
/// the sensor moved to a random sub-cell, and the resulting 20x20 tile is
/// replicated 5x5. Transmitters are only allowed in the inner 10x10 cells of
/// each tile.
pub fn upsample_testbed_grid<R: Rng + ?Sized>(grid: &TestbedGrid, rng: &mut R) -> Result<TestbedLayout> {
    if grid.grid_size != TESTBED_SIDE {
        return Err(Error::shape("10x10 testbed grid", grid.grid_size));
    }
    let mut tile_sensors = Vec::with_capacity(grid.sensors.len());
    for &(r, c) in &grid.sensors {
        if r >= TESTBED_SIDE || c >= TESTBED_SIDE {
            return Err(Error::Domain(format!("testbed sensor ({r}, {c}) outside the grid")));
        }
        tile_sensors.push((2 * r + rng.gen_range(0..2), 2 * c + rng.gen_range(0..2)));
    }
    let side = TILE_SIDE * TILE_REPEAT;
    let mut cells = Vec::with_capacity(tile_sensors.len() * TILE_REPEAT * TILE_REPEAT);
    let mut candidates = Vec::with_capacity(TILE_REPEAT * TILE_REPEAT * 100);
    for tr in 0..TILE_REPEAT {
        for tc in 0..TILE_REPEAT {
            let (or, oc) = (tr * TILE_SIDE, tc * TILE_SIDE);
            cells.extend(tile_sensors.iter().map(|&(r, c)| (or + r) * side + oc + c));
            for r in TILE_MARGIN..TILE_SIDE - TILE_MARGIN {
                for c in TILE_MARGIN..TILE_SIDE - TILE_MARGIN {
                    candidates.push((or + r) * side + oc + c);
                }
            }
        }
    }
    candidates.sort_unstable();
    Ok(TestbedLayout {
        sensors: SensorLayout::new(side, cells)?,
        pixel_size: grid.cell_size / 2.0,
        tile_sensors,
        candidate_tx_cells: candidates,
    })
}

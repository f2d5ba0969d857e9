//! Field geometry and random scene sampling.
//!
//! Coordinates are continuous and measured in pixels: cell `(i, j)` covers
//! `[i, i + 1) x [j, j + 1)` and its center is `(i + 0.5, j + 0.5)`. The
//! first coordinate indexes image rows.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum pairwise separation (pixels) between authorized users.
pub const AUTHORIZED_MIN_SEPARATION: f64 = 40.0;
/// Separation is only enforced up to this many authorized users.
pub const AUTHORIZED_SEPARATION_MAX_COUNT: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 2_000;
const PLACEMENT_RESTARTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Integer cell containing the point (may be outside the field).
    pub fn cell(&self) -> (i64, i64) {
        (self.x.floor() as i64, self.y.floor() as i64)
    }

    pub fn cell_center(row: usize, col: usize) -> Point {
        Point::new(row as f64 + 0.5, col as f64 + 0.5)
    }
}

/// Either a fixed count or an inclusive `[min, max]` range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Count {
    Fixed(usize),
    Range([usize; 2]),
}

impl Count {
    pub fn bounds(&self) -> (usize, usize) {
        match *self {
            Count::Fixed(n) => (n, n),
            Count::Range([lo, hi]) => (lo, hi),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let (lo, hi) = self.bounds();
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..=hi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerRange {
    pub min: f64,
    pub max: f64,
}

impl PowerRange {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.gen_range(self.min..self.max)
        }
    }

    pub fn contains(&self, p: f64) -> bool {
        p >= self.min && p <= self.max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid_size: usize,
    /// Meters per cell side.
    pub pixel_size: f64,
    /// Fraction of cells hosting a sensor.
    pub sensor_density: f64,
    pub num_intruders: Count,
    /// Intruder transmit power, dBm.
    pub power_range: PowerRange,
    pub num_authorized: usize,
    /// Authorized transmit power, dBm.
    pub authorized_power_range: PowerRange,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid_size: 100,
            pixel_size: 10.0,
            sensor_density: 0.06,
            num_intruders: Count::Fixed(5),
            power_range: PowerRange { min: 0.0, max: 5.0 },
            num_authorized: 0,
            authorized_power_range: PowerRange { min: 0.0, max: 5.0 },
        }
    }
}

impl FieldConfig {
    pub fn num_cells(&self) -> usize {
        self.grid_size * self.grid_size
    }

    pub fn num_sensors(&self) -> usize {
        (self.sensor_density * self.num_cells() as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 {
            return Err(Error::Config("grid_size must be positive".into()));
        }
        if !(self.pixel_size > 0.0) {
            return Err(Error::Config("pixel_size must be positive".into()));
        }
        if !(self.sensor_density > 0.0 && self.sensor_density <= 1.0) {
            return Err(Error::Config(format!(
                "sensor_density {} outside (0, 1]",
                self.sensor_density
            )));
        }
        let (lo, hi) = self.num_intruders.bounds();
        if lo > hi {
            return Err(Error::Config(format!("num_intruders range [{lo}, {hi}] is inverted")));
        }
        for (name, r) in [
            ("power_range", self.power_range),
            ("authorized_power_range", self.authorized_power_range),
        ] {
            if !(r.min <= r.max) {
                return Err(Error::Config(format!("{name} [{}, {}] is inverted", r.min, r.max)));
            }
        }
        if self.num_sensors() > self.num_cells() {
            return Err(Error::Config("more sensors than cells".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TxKind {
    Intruder,
    Authorized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transmitter {
    pub x: f64,
    pub y: f64,
    /// dBm
    pub power: f64,
    pub kind: TxKind,
}

impl Transmitter {
    pub fn intruder(x: f64, y: f64, power: f64) -> Self {
        Self { x, y, power, kind: TxKind::Intruder }
    }

    pub fn authorized(x: f64, y: f64, power: f64) -> Self {
        Self { x, y, power, kind: TxKind::Authorized }
    }

    pub fn location(&self) -> Point {
        Point::new(self.x, self.y)
    }
}

/// Sorted, unique sensor cell indices (`row * grid_size + col`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorLayout {
    pub grid_size: usize,
    pub cells: Vec<usize>,
}

impl SensorLayout {
    pub fn new(grid_size: usize, mut cells: Vec<usize>) -> Result<Self> {
        cells.sort_unstable();
        let before = cells.len();
        cells.dedup();
        if cells.len() != before {
            return Err(Error::Config("duplicate sensor cells".into()));
        }
        if cells.last().is_some_and(|&c| c >= grid_size * grid_size) {
            return Err(Error::Config("sensor cell outside the field".into()));
        }
        Ok(Self { grid_size, cells })
    }

    pub fn sample<R: Rng + ?Sized>(config: &FieldConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let cells = sample_indices(rng, config.num_cells(), config.num_sensors()).into_vec();
        Self::new(config.grid_size, cells)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell_rc(&self, cell: usize) -> (usize, usize) {
        (cell / self.grid_size, cell % self.grid_size)
    }

    pub fn positions(&self) -> impl Iterator<Item = Point> + '_ {
        self.cells.iter().map(|&c| {
            let (r, col) = self.cell_rc(c);
            Point::cell_center(r, col)
        })
    }

    /// Stable fingerprint used to tell layouts apart in manifests.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.grid_size as u64).to_le_bytes());
        for c in &self.cells {
            h.update((*c as u64).to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: FieldConfig,
    pub sensors: SensorLayout,
    pub transmitters: Vec<Transmitter>,
}

impl Scene {
    pub fn intruders(&self) -> impl Iterator<Item = &Transmitter> {
        self.transmitters.iter().filter(|t| t.kind == TxKind::Intruder)
    }

    pub fn authorized(&self) -> impl Iterator<Item = &Transmitter> {
        self.transmitters.iter().filter(|t| t.kind == TxKind::Authorized)
    }
}

/// Samples a scene with a freshly drawn sensor layout.
pub fn sample_scene<R: Rng + ?Sized>(config: &FieldConfig, rng: &mut R) -> Result<Scene> {
    let layout = SensorLayout::sample(config, rng)?;
    sample_scene_with_layout(config, &layout, rng)
}

/// Samples transmitters over a fixed sensor layout.
pub fn sample_scene_with_layout<R: Rng + ?Sized>(
    config: &FieldConfig,
    layout: &SensorLayout,
    rng: &mut R,
) -> Result<Scene> {
    config.validate()?;
    if layout.grid_size != config.grid_size {
        return Err(Error::Config(format!(
            "layout grid {} does not match field grid {}",
            layout.grid_size, config.grid_size
        )));
    }
    let side = config.grid_size as f64;
    let n = config.num_intruders.sample(rng);
    let mut transmitters = Vec::with_capacity(n + config.num_authorized);
    for _ in 0..n {
        let x = rng.gen_range(0.0..side);
        let y = rng.gen_range(0.0..side);
        transmitters.push(Transmitter::intruder(x, y, config.power_range.sample(rng)));
    }
    transmitters.extend(place_authorized(config, rng)?);
    Ok(Scene {
        config: config.clone(),
        sensors: layout.clone(),
        transmitters,
    })
}

fn place_authorized<R: Rng + ?Sized>(config: &FieldConfig, rng: &mut R) -> Result<Vec<Transmitter>> {
    let count = config.num_authorized;
    let spread = count <= AUTHORIZED_SEPARATION_MAX_COUNT;
    // Sequential placement can jam with no room left for the last user, so
    // start over from scratch when a round runs out of attempts.
    for _ in 0..PLACEMENT_RESTARTS {
        let mut placed: Vec<Transmitter> = Vec::with_capacity(count);
        let mut attempts = 0;
        while placed.len() < count && attempts < PLACEMENT_ATTEMPTS {
            attempts += 1;
            let r = rng.gen_range(0..config.grid_size);
            let c = rng.gen_range(0..config.grid_size);
            let p = Point::cell_center(r, c);
            if spread
                && placed
                    .iter()
                    .any(|t| t.location().distance(&p) < AUTHORIZED_MIN_SEPARATION)
            {
                continue;
            }
            placed.push(Transmitter::authorized(
                p.x,
                p.y,
                config.authorized_power_range.sample(rng),
            ));
        }
        if placed.len() == count {
            return Ok(placed);
        }
    }
    Err(Error::Config(format!(
        "could not place {count} authorized users {AUTHORIZED_MIN_SEPARATION} px apart"
    )))
}

/// Two sensor layouts with no cell in common (train vs. test).
pub fn disjoint_sensor_split<R: Rng + ?Sized>(
    config: &FieldConfig,
    rng: &mut R,
) -> Result<(SensorLayout, SensorLayout)> {
    config.validate()?;
    let k = config.num_sensors();
    if 2 * k > config.num_cells() {
        return Err(Error::Config(format!(
            "cannot split {} cells into two disjoint sets of {k}",
            config.num_cells()
        )));
    }
    let picked = sample_indices(rng, config.num_cells(), 2 * k).into_vec();
    let (a, b) = picked.split_at(k);
    Ok((
        SensorLayout::new(config.grid_size, a.to_vec())?,
        SensorLayout::new(config.grid_size, b.to_vec())?,
    ))
}

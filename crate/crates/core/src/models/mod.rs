//! Network architectures and their shared building blocks.
//!
//! All four networks are fully convolutional. Each is described by a list of
//! [`ConvSpec`]s so that shapes and receptive fields can be checked without
//! running a forward pass.

mod checkpoint;
mod detector;
mod predpower;
mod train;
mod translation;

pub use checkpoint::{load_checkpoint, meta_path, save_checkpoint, CheckpointMeta};
pub use detector::{
    anchor_iou, best_anchor, detector_loss, Detector, DetectorHeadSpec, GroundTruthBox, HEAD_FIELDS,
};
pub use predpower::{PredPower, PREDPOWER_PLAN};
pub use train::{fit, Optimizer, Split, TrainConfig, TrainReport};
pub use translation::{Sen2Peak, SubtractNet, SEN2PEAK_PLAN, SUBTRACTNET_PLAN};

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{nn, Kind, Tensor};

use crate::rng::SeedTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Group,
    Batch,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Leaky,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: i64,
    pub out_channels: i64,
    pub kernel: i64,
    pub stride: i64,
    pub padding: i64,
    pub norm: Norm,
    pub activation: Activation,
}

impl ConvSpec {
    pub const fn new(in_channels: i64, out_channels: i64, kernel: i64, stride: i64, padding: i64) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            norm: Norm::None,
            activation: Activation::None,
        }
    }

    pub const fn norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub const fn act(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Group count for group normalization.
    pub fn groups(&self) -> i64 {
        self.out_channels.min(8)
    }

    pub fn output_side(&self, input: i64) -> i64 {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Spatial side after each layer of `plan`.
pub fn output_sides(plan: &[ConvSpec], input: i64) -> Vec<i64> {
    plan.iter()
        .scan(input, |side, spec| {
            *side = spec.output_side(*side);
            Some(*side)
        })
        .collect()
}

/// Side of the input window that can influence one output unit.
pub fn receptive_field(plan: &[ConvSpec]) -> i64 {
    let mut rf = 1;
    let mut jump = 1;
    for spec in plan {
        rf += (spec.kernel - 1) * jump;
        jump *= spec.stride;
    }
    rf
}

enum NormLayer {
    Group(nn::GroupNorm),
    Batch(nn::BatchNorm),
    Identity,
}

pub(crate) struct ConvLayer {
    spec: ConvSpec,
    conv: nn::Conv2D,
    norm: NormLayer,
}

impl ConvLayer {
    pub(crate) fn new(p: &nn::Path, spec: ConvSpec) -> Self {
        let cfg = nn::ConvConfig {
            stride: spec.stride,
            padding: spec.padding,
            ..Default::default()
        };
        let conv = nn::conv2d(p / "conv", spec.in_channels, spec.out_channels, spec.kernel, cfg);
        let norm = match spec.norm {
            Norm::Group => NormLayer::Group(nn::group_norm(
                p / "norm",
                spec.groups(),
                spec.out_channels,
                Default::default(),
            )),
            Norm::Batch => NormLayer::Batch(nn::batch_norm2d(p / "norm", spec.out_channels, Default::default())),
            Norm::None => NormLayer::Identity,
        };
        Self { spec, conv, norm }
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool, use_norm: bool) -> Tensor {
        let mut y = x.apply(&self.conv);
        if use_norm {
            y = match &self.norm {
                NormLayer::Group(g) => y.apply(g),
                NormLayer::Batch(b) => y.apply_t(b, train),
                NormLayer::Identity => y,
            };
        }
        match self.spec.activation {
            Activation::Relu => y.relu(),
            Activation::Leaky => y.leaky_relu(),
            Activation::None => y,
        }
    }
}

/// A plain chain of conv layers.
pub(crate) struct ConvStack {
    pub(crate) layers: Vec<ConvLayer>,
}

impl ConvStack {
    pub(crate) fn new(p: &nn::Path, plan: &[ConvSpec]) -> Self {
        let layers = plan
            .iter()
            .enumerate()
            .map(|(i, &spec)| ConvLayer::new(&(p / format!("layer{i}")), spec))
            .collect();
        Self { layers }
    }

    pub(crate) fn forward(&self, x: &Tensor, train: bool, use_norm: bool) -> Tensor {
        self.layers
            .iter()
            .fold(x.shallow_clone(), |h, layer| layer.forward(&h, train, use_norm))
    }
}

/// Common surface of the trainable networks.
pub trait Network {
    fn name(&self) -> &'static str;
    fn var_store(&self) -> &nn::VarStore;
    fn var_store_mut(&mut self) -> &mut nn::VarStore;
    /// Expected `[channels, height, width]` of one input.
    fn input_shape(&self) -> [i64; 3];
    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor;

    fn forward(&self, x: &Tensor) -> Tensor {
        tch::no_grad(|| self.forward_t(x, false))
    }

    fn check_input(&self, x: &Tensor) -> crate::Result<()> {
        let size = x.size();
        let [c, h, w] = self.input_shape();
        if size.len() != 4 || size[1] != c || size[2] != h || size[3] != w {
            return Err(crate::Error::shape(format!("[N, {c}, {h}, {w}]"), size));
        }
        Ok(())
    }
}

/// Re-initializes every conv weight and bias from a seeded stream with
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, so weights depend only on `seed`.
pub(crate) fn seeded_init(vs: &nn::VarStore, seed: u64) {
    let vars = vs.variables();
    let mut names: Vec<&String> = vars.keys().filter(|k| k.contains("conv")).collect();
    names.sort();
    let mut rng = SeedTree::new(seed).stream(crate::rng::WEIGHTS, 0);
    for name in names {
        let var = &vars[name];
        let fan_in = if name.ends_with("weight") {
            var.size()[1..].iter().product::<i64>()
        } else {
            let weight = name.trim_end_matches("bias").to_string() + "weight";
            vars.get(&weight)
                .map(|w| w.size()[1..].iter().product::<i64>())
                .unwrap_or(1)
        };
        let bound = 1.0 / (fan_in as f64).sqrt();
        let values: Vec<f32> = (0..var.numel())
            .map(|_| rng.gen_range(-bound..bound) as f32)
            .collect();
        let t = Tensor::from_slice(&values).view(var.size().as_slice()).to_kind(Kind::Float);
        tch::no_grad(|| {
            let mut v = var.shallow_clone();
            v.copy_(&t);
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_field_of_stride_one_stacks() {
        let plan = [ConvSpec::new(1, 1, 5, 1, 2); 4];
        assert_eq!(receptive_field(&plan), 17);
        assert_eq!(receptive_field(&[ConvSpec::new(1, 1, 5, 1, 2); 8]), 33);
        assert_eq!(output_sides(&plan, 100), vec![100; 4]);
    }

    #[test]
    fn receptive_field_with_strides() {
        let plan = [
            ConvSpec::new(3, 8, 3, 2, 1),
            ConvSpec::new(8, 8, 3, 1, 1),
            ConvSpec::new(8, 16, 3, 2, 1),
        ];
        // 1 + 2 + 2*2 + 2*2
        assert_eq!(receptive_field(&plan), 11);
        assert_eq!(output_sides(&plan, 416), vec![208, 208, 104]);
    }
}

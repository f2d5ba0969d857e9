//! Single-transmitter power regressor over a 21x21 crop.

use tch::{nn, Device, Tensor};

use super::{seeded_init, Activation, ConvSpec, ConvStack, Network, Norm};
use crate::encoding::POWER_PATCH;

const fn bn_relu(i: i64, o: i64) -> ConvSpec {
    ConvSpec::new(i, o, 5, 1, 0).norm(Norm::Batch).act(Activation::Relu)
}

/// Unpadded 5x5 layers shrink 21 -> 17 -> 13 -> 9 -> 5 -> 1.
pub const PREDPOWER_PLAN: [ConvSpec; 5] = [
    bn_relu(1, 16),
    bn_relu(16, 32),
    bn_relu(32, 32),
    bn_relu(32, 16),
    ConvSpec::new(16, 1, 5, 1, 0),
];

pub struct PredPower {
    vs: nn::VarStore,
    net: ConvStack,
}

impl PredPower {
    pub fn new(seed: u64) -> Self {
        let vs = nn::VarStore::new(Device::Cpu);
        let net = ConvStack::new(&(vs.root() / "predpower"), &PREDPOWER_PLAN);
        seeded_init(&vs, seed);
        Self { vs, net }
    }

    /// Per-layer outputs, for shape inspection.
    pub fn layer_shapes(&self, x: &Tensor) -> Vec<Vec<i64>> {
        tch::no_grad(|| {
            let mut h = x.shallow_clone();
            self.net
                .layers
                .iter()
                .map(|layer| {
                    h = layer.forward(&h, false, true);
                    h.size()
                })
                .collect()
        })
    }
}

impl Network for PredPower {
    fn name(&self) -> &'static str {
        "predpower"
    }

    fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    fn input_shape(&self) -> [i64; 3] {
        [1, POWER_PATCH as i64, POWER_PATCH as i64]
    }

    /// Returns one scalar (dBm) per input patch, shape `[N]`.
    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.net.forward(x, train, true).flatten(1, -1).squeeze_dim(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{output_sides, receptive_field};
    use tch::Kind;

    #[test]
    fn spatial_plan() {
        assert_eq!(output_sides(&PREDPOWER_PLAN, 21), vec![17, 13, 9, 5, 1]);
        assert_eq!(receptive_field(&PREDPOWER_PLAN), 21);
        let net = PredPower::new(0);
        let x = Tensor::randn([3, 1, 21, 21], (Kind::Float, Device::Cpu));
        let sides: Vec<i64> = net.layer_shapes(&x).iter().map(|s| s[2]).collect();
        assert_eq!(sides, vec![17, 13, 9, 5, 1]);
        assert_eq!(net.forward(&x).size(), vec![3]);
    }
}

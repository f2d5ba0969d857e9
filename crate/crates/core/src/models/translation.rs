//! Image-to-image translation networks: sensor readings to peaks, and
//! authorized-user subtraction.

use tch::{nn, Device, Tensor};

use super::{seeded_init, Activation, ConvSpec, ConvStack, Network, Norm};

const fn gn_relu(i: i64, o: i64) -> ConvSpec {
    ConvSpec::new(i, o, 5, 1, 2).norm(Norm::Group).act(Activation::Relu)
}

/// Four 5x5 layers, no down-sampling; 17x17 receptive field.
pub const SEN2PEAK_PLAN: [ConvSpec; 4] = [
    gn_relu(1, 16),
    gn_relu(16, 32),
    gn_relu(32, 16),
    ConvSpec::new(16, 1, 5, 1, 2),
];

/// Eight 5x5 layers over a two-channel input; 33x33 receptive field.
pub const SUBTRACTNET_PLAN: [ConvSpec; 8] = [
    gn_relu(2, 16),
    gn_relu(16, 32),
    gn_relu(32, 64),
    gn_relu(64, 64),
    gn_relu(64, 32),
    gn_relu(32, 16),
    gn_relu(16, 8),
    ConvSpec::new(8, 1, 5, 1, 2),
];

macro_rules! translation_net {
    ($name:ident, $label:literal, $plan:expr, $channels:expr) => {
        pub struct $name {
            vs: nn::VarStore,
            net: ConvStack,
            side: i64,
        }

        impl $name {
            pub fn new(seed: u64) -> Self {
                Self::with_side(seed, 100)
            }

            pub fn with_side(seed: u64, side: i64) -> Self {
                let vs = nn::VarStore::new(Device::Cpu);
                let net = ConvStack::new(&(vs.root() / $label), &$plan);
                seeded_init(&vs, seed);
                Self { vs, net, side }
            }

            /// Forward pass with every normalization layer bypassed, i.e.
            /// only the convolutional path. Used to check locality.
            pub fn forward_conv_path(&self, x: &Tensor) -> Tensor {
                tch::no_grad(|| self.net.forward(x, false, false))
            }
        }

        impl Network for $name {
            fn name(&self) -> &'static str {
                $label
            }

            fn var_store(&self) -> &nn::VarStore {
                &self.vs
            }

            fn var_store_mut(&mut self) -> &mut nn::VarStore {
                &mut self.vs
            }

            fn input_shape(&self) -> [i64; 3] {
                [$channels, self.side, self.side]
            }

            fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
                self.net.forward(x, train, true)
            }
        }
    };
}

translation_net!(Sen2Peak, "sen2peak", SEN2PEAK_PLAN, 1);
translation_net!(SubtractNet, "subtractnet", SUBTRACTNET_PLAN, 2);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{output_sides, receptive_field};
    use tch::Kind;

    #[test]
    fn plans_match_declared_shapes() {
        assert_eq!(receptive_field(&SEN2PEAK_PLAN), 17);
        assert_eq!(receptive_field(&SUBTRACTNET_PLAN), 33);
        assert_eq!(output_sides(&SEN2PEAK_PLAN, 100), vec![100; 4]);
        assert_eq!(output_sides(&SUBTRACTNET_PLAN, 100), vec![100; 8]);
        assert!(SEN2PEAK_PLAN.iter().any(|s| s.out_channels == 32));
        assert!(SEN2PEAK_PLAN.iter().all(|s| s.out_channels <= 32));
    }

    #[test]
    fn output_shape_matches_input() {
        let net = Sen2Peak::new(1);
        let x = Tensor::randn([2, 1, 100, 100], (Kind::Float, Device::Cpu));
        assert_eq!(net.forward(&x).size(), vec![2, 1, 100, 100]);
        let sub = SubtractNet::new(1);
        let x2 = Tensor::randn([1, 2, 100, 100], (Kind::Float, Device::Cpu));
        assert_eq!(sub.forward(&x2).size(), vec![1, 1, 100, 100]);
        assert!(net.check_input(&x2).is_err());
    }

    #[test]
    fn zero_input_gives_constant_interior() {
        let net = Sen2Peak::new(5);
        let y = net.forward(&Tensor::zeros([1, 1, 100, 100], (Kind::Float, Device::Cpu)));
        let interior = y.narrow(2, 10, 80).narrow(3, 10, 80);
        let spread = interior.max().double_value(&[]) - interior.min().double_value(&[]);
        assert!(spread.abs() < 1e-5, "{spread}");
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Sen2Peak::new(9);
        let b = Sen2Peak::new(9);
        let c = Sen2Peak::new(10);
        let x = Tensor::randn([1, 1, 100, 100], (Kind::Float, Device::Cpu));
        assert!(a.forward(&x).equal(&b.forward(&x)));
        assert!(!a.forward(&x).equal(&c.forward(&x)));
    }
}

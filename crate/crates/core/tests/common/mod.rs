#![allow(dead_code)]

use imcsca::attack::HwKnowledge;
use imcsca::mapper::{map_network, TileConfig, TileMapping};
use imcsca::netspec::{
    propagate_shapes, synthetic_images, FloatWeights, LayerSpec, NetworkSpec, QuantizedWeights,
    Shape,
};
use imcsca::powersim::{simulate_inference, SimOutput, SimulationOptions, TechnologyModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Run {
    pub weights: QuantizedWeights,
    pub mappings: Vec<TileMapping>,
    pub out: SimOutput,
}

pub fn run(
    net: &NetworkSpec,
    weight_seed: u64,
    images: usize,
    image_seed: u64,
    opts: &SimulationOptions,
) -> Run {
    let cfg = TileConfig::default();
    let weights = FloatWeights::random(net, weight_seed)
        .unwrap()
        .quantize(net)
        .unwrap();
    let mappings = map_network(net, &weights, &cfg).unwrap();
    let imgs = synthetic_images(net.input, images, image_seed);
    let out = simulate_inference(
        &mappings,
        net,
        &imgs,
        &cfg,
        &TechnologyModel::default(),
        opts,
    )
    .unwrap();
    Run {
        weights,
        mappings,
        out,
    }
}

pub fn hw_for(net: &NetworkSpec) -> HwKnowledge {
    HwKnowledge {
        input: net.input,
        ..HwKnowledge::default()
    }
}

/// Small random conv/fc network. With `even` every output size is even,
/// the resolution of the conversion-count readout.
pub fn random_network(seed: u64, even: bool) -> NetworkSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| {
        let v = rng.random_range(lo..=hi);
        if even {
            v + v % 2
        } else {
            v
        }
    };
    loop {
        let side = rng.random_range(8..=14);
        let input = Shape::new([1, 3][rng.random_range(0..2)], side, side);
        let mut layers = Vec::new();
        for _ in 0..rng.random_range(1..=2) {
            let kernel = [1, 3, 5][rng.random_range(0..3)];
            let padding = if rng.random_bool(0.3) { kernel / 2 } else { 0 };
            layers.push(LayerSpec::Conv {
                out_channels: size(&mut rng, 2, 12),
                kernel,
                stride: 1,
                padding,
            });
            if rng.random_bool(0.4) {
                layers.push(LayerSpec::Pool { size: 2 });
            }
        }
        for _ in 0..rng.random_range(1..=2) {
            layers.push(LayerSpec::Fc {
                out_features: size(&mut rng, 2, 40),
            });
        }
        let net = NetworkSpec::new(input, layers);
        // conv outputs must stay at least 2x2 so they are not mistaken for FC
        let Ok(shapes) = propagate_shapes(&net) else {
            continue;
        };
        let ok =
            net.layers.iter().zip(&shapes).all(|(l, s)| {
                !matches!(l, LayerSpec::Conv { .. }) || (s.height >= 2 && s.width >= 2)
            });
        if ok {
            return net;
        }
    }
}

use ndnet::Tensor;
use proptest::prelude::*;
use unetlab::unet::{
    measure_receptive_field, receptive_field, receptive_field_of, Block, Denoiser, Position, Probe, Stage, UNetConfig,
    UNetModel,
};

fn small(encoders: usize, base: usize, size: usize) -> UNetConfig {
    UNetConfig {
        in_channels: 1,
        base_channels: base,
        encoder_blocks: encoders,
        layers_per_encoder: 1,
        layers_middle: 1,
        layers_per_decoder: 1,
        kernel_size: 3,
        image_size: size,
    }
}

#[test]
fn desk_parameter_count_matches_hand_enumeration() {
    // Layer by layer, kernel plus layer-norm gain and shift:
    // E1 176 + 2336, E2 4672 + 9280, M 18560 + 2·36992,
    // D2 27712 + 2·9280, D1 6944 + 2·2336, head 16·9 + 1.
    let hand = 176 + 2336 + 4672 + 9280 + 18560 + 2 * 36992 + 27712 + 2 * 9280 + 6944 + 2 * 2336 + 145;
    assert_eq!(hand, 167_041);
    let cfg = UNetConfig::desk();
    assert_eq!(cfg.parameter_count(), hand);
    assert_eq!(UNetModel::build(cfg, 0).unwrap().num_parameters(), hand);
}

#[test]
fn full_scale_count_agrees_with_allocated_tensors() {
    let cfg = UNetConfig::paper_scale();
    let model = UNetModel::build(cfg.clone(), 0).unwrap();
    let allocated: usize = model.parameters().iter().map(|p| p.len()).sum();
    assert_eq!(allocated, cfg.parameter_count());
    assert_eq!(model.parameter_names().len(), model.parameters().len());
}

#[test]
fn desk_receptive_field_by_impulse() {
    let cfg = UNetConfig::desk();
    let closed = receptive_field(&cfg);
    assert_eq!(closed, 40);
    assert_eq!(measure_receptive_field(&cfg.stages_to_middle()).unwrap(), closed);
}

#[test]
fn pooling_doubles_the_kernel_footprint() {
    let chain = [Stage::Conv(3), Stage::Pool2, Stage::Conv(3)];
    assert_eq!(receptive_field_of(&chain), 8);
    assert_eq!(measure_receptive_field(&chain).unwrap(), 8);
}

#[test]
fn residual_and_probe_shapes() {
    let cfg = UNetConfig::desk();
    let model = UNetModel::build(cfg.clone(), 1).unwrap();
    let x = Tensor::from_fn(&[3, 1, 16, 16], |i| (i % 17) as f32 / 16.0);
    assert_eq!(model.residual(&x).unwrap().shape(), &[3, 1, 16, 16]);
    for probe in Probe::all(&cfg) {
        let a = model.activations(&x, probe).unwrap();
        let side = match (probe.block, probe.position) {
            (Block::Middle, Position::Input) => cfg.block_extent(Block::Encoder(cfg.encoder_blocks)) / 2,
            (b, _) => cfg.block_extent(b),
        };
        assert_eq!(a.shape(), &[3, probe.channels(&cfg), side, side], "{probe}");
        if probe.is_post_relu() {
            assert!(a.data().iter().all(|&v| v >= 0.0), "{probe} has negative entries");
        }
    }
    assert_eq!(Probe::middle_output().channels(&cfg), 64);
}

#[test]
fn batch_items_are_processed_independently() {
    let model = UNetModel::build(UNetConfig::desk(), 2).unwrap();
    let a = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 7) as f32 / 7.0);
    let b = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 5) as f32 / 5.0);
    let both = Tensor::stack(&[a.index_axis0(0).unwrap(), b.index_axis0(0).unwrap()]).unwrap();
    let rb = model.residual(&both).unwrap();
    let ra = model.residual(&a).unwrap();
    let rbb = model.residual(&b).unwrap();
    let n = ra.len();
    for (x, y) in rb.data()[..n].iter().zip(ra.data()) {
        assert!((x - y).abs() < 1e-5);
    }
    for (x, y) in rb.data()[n..].iter().zip(rbb.data()) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn zeroed_head_gives_identity_denoiser() {
    let mut model = UNetModel::build(UNetConfig::desk(), 3).unwrap();
    model.zero_output_layer();
    let x = Tensor::from_fn(&[2, 1, 16, 16], |i| i as f32 * 1e-3);
    assert!(model.residual(&x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn build_is_seed_deterministic() {
    let a = UNetModel::build(UNetConfig::desk(), 7).unwrap();
    let b = UNetModel::build(UNetConfig::desk(), 7).unwrap();
    let c = UNetModel::build(UNetConfig::desk(), 8).unwrap();
    assert_eq!(a.parameters(), b.parameters());
    assert_ne!(a.parameters(), c.parameters());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = UNetConfig::desk();
    c.kernel_size = 4;
    assert!(UNetModel::build(c, 0).is_err());
    assert!(UNetModel::build(small(0, 4, 8), 0).is_err());
    assert!(UNetModel::build(small(3, 4, 12), 0).is_err());
    let model = UNetModel::build(UNetConfig::desk(), 0).unwrap();
    assert!(model.activations(&Tensor::zeros(&[1, 1, 16, 16]), Probe::output(Block::Encoder(3))).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn count_and_shapes_hold_for_any_config(
        encoders in 1usize..=3,
        base in 1usize..=4,
        mult in 1usize..=2,
        le in 1usize..=2,
        lm in 1usize..=2,
        ld in 1usize..=2,
        channels in prop::sample::select(vec![1usize, 3]),
    ) {
        let size = (1 << encoders) * mult * 2;
        let cfg = UNetConfig {
            in_channels: channels,
            base_channels: base,
            encoder_blocks: encoders,
            layers_per_encoder: le,
            layers_middle: lm,
            layers_per_decoder: ld,
            kernel_size: 3,
            image_size: size,
        };
        let model = UNetModel::build(cfg.clone(), 0).unwrap();
        let allocated: usize = model.parameters().iter().map(|p| p.len()).sum();
        prop_assert_eq!(allocated, cfg.parameter_count());
        let x = Tensor::full(&[2, channels, size, size], 0.5);
        let r = model.residual(&x).unwrap();
        prop_assert_eq!(r.shape(), x.shape());
        let m = model.activations(&x, Probe::middle_output()).unwrap();
        prop_assert_eq!(m.shape(), &[2, base << encoders, size >> encoders, size >> encoders]);
    }

    #[test]
    fn receptive_field_formula_matches_impulse(
        chain in prop::collection::vec(
            prop_oneof![Just(Stage::Conv(3)), Just(Stage::Conv(5)), Just(Stage::Pool2)],
            1..6,
        )
    ) {
        prop_assume!(chain.iter().any(|s| matches!(s, Stage::Conv(_))));
        prop_assert_eq!(measure_receptive_field(&chain).unwrap(), receptive_field_of(&chain));
    }
}

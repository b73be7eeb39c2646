//! f64 finite-difference verification for every layer and the sMLP block,
//! over both stored parameters and inputs. Relative error bound 1e-4.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use smlp::arch::{SmlpBlock, SmlpSettings, StageConfig, TokenMixing};
use smlp::gradcheck::{gradcheck_inputs, gradcheck_params};
use smlp::init::uniform;
use smlp::layers::{DepthwiseConv3x3, DropPath, Linear, Mode, NormKind, NormLayer};
use smlp::params::ParamStore;
use smlp::tape::NodeId;
use smlp::tensor::Tensor;
use smlp::{Result, Tape64};

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn weighted_sum(tape: &mut Tape64, y: NodeId, weights: &Tensor<f64>) -> Result<NodeId> {
    let w = tape.leaf(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

#[test]
fn parameter_counts_match_closed_forms_over_random_configs() {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for _ in 0..30 {
        let mut store = ParamStore::<f64>::new();
        let (inp, out) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
        let bias = rng.gen_bool(0.5);
        let fc = Linear::init(&mut store, &mut rng, "fc", inp, out, bias);
        assert_eq!(
            fc.param_count(),
            (out * inp + if bias { out } else { 0 }) as u64
        );

        let c = rng.gen_range(1..=64);
        let conv_bias = rng.gen_bool(0.5);
        let conv = DepthwiseConv3x3::init(&mut store, &mut rng, "dw", c, conv_bias);
        assert_eq!(
            conv.param_count(),
            (9 * c + if conv_bias { c } else { 0 }) as u64
        );

        let nc = rng.gen_range(1..=64);
        let kind = if rng.gen_bool(0.5) {
            NormKind::Batch
        } else {
            NormKind::Layer
        };
        let norm = NormLayer::init(&mut store, "n", kind, nc);
        assert_eq!(norm.param_count(), 2 * nc as u64);

        // the store agrees with the sum of the closed forms (buffers excluded)
        assert_eq!(
            store.trainable_scalars(),
            fc.param_count() + conv.param_count() + norm.param_count()
        );
    }
}

#[test]
fn linear_layer_params_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let layer = Linear::init(&mut store, &mut rng, "fc", 5, 4, true);
    let input: Tensor<f64> = uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[3, 4], -1.0, 1.0, &mut rng);

    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = layer.forward(tape, store, x)?;
            weighted_sum(tape, y, &w)
        },
        &mut store,
        EPS,
        0,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "params: {err}");

    let err = gradcheck_inputs(
        |tape, ids| {
            let y = layer.forward(tape, &store, ids[0])?;
            weighted_sum(tape, y, &w)
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "input: {err}");
}

#[test]
fn dwconv_layer_params_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let layer = DepthwiseConv3x3::init(&mut store, &mut rng, "dw", 3, true);
    // random kernels instead of the tiny init so gradients are not degenerate
    *store.value_mut(layer.kernel) = uniform(&[3, 3, 3], -1.0, 1.0, &mut rng);
    let input: Tensor<f64> = uniform(&[2, 5, 4, 3], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[2, 5, 4, 3], -1.0, 1.0, &mut rng);

    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = layer.forward(tape, store, x)?;
            weighted_sum(tape, y, &w)
        },
        &mut store,
        EPS,
        0,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "params: {err}");

    let err = gradcheck_inputs(
        |tape, ids| {
            let y = layer.forward(tape, &store, ids[0])?;
            weighted_sum(tape, y, &w)
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "input: {err}");
}

#[test]
fn batch_norm_eval_mode_with_warmed_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let layer = NormLayer::init(&mut store, "bn", NormKind::Batch, 4);
    *store.value_mut(layer.gamma) = uniform(&[4], 0.5, 1.5, &mut rng);
    *store.value_mut(layer.beta) = uniform(&[4], -0.5, 0.5, &mut rng);
    // warm the running statistics away from the (0, 1) init
    {
        let mut tape = Tape64::new();
        let x = tape.leaf(uniform(&[4, 3, 3, 4], -2.0, 2.0, &mut rng));
        layer
            .forward(&mut tape, &mut store, x, Mode::Train)
            .unwrap();
    }
    let input: Tensor<f64> = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = layer.forward(tape, store, x, Mode::Eval)?;
            weighted_sum(tape, y, &w)
        },
        &mut store,
        EPS,
        0,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "params: {err}");

    let err = gradcheck_inputs(
        |tape, ids| {
            let y = layer.forward(tape, &mut store, ids[0], Mode::Eval)?;
            weighted_sum(tape, y, &w)
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "input: {err}");
}

#[test]
fn batch_norm_train_mode_backward_is_exact_too() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let layer = NormLayer::init(&mut store, "bn", NormKind::Batch, 3);
    let input: Tensor<f64> = uniform(&[3, 2, 2, 3], -2.0, 2.0, &mut rng);
    let w: Tensor<f64> = uniform(&[3, 2, 2, 3], -1.0, 1.0, &mut rng);
    let err = gradcheck_inputs(
        |tape, ids| {
            let y = layer.forward(tape, &mut store, ids[0], Mode::Train)?;
            weighted_sum(tape, y, &w)
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

#[test]
fn layer_norm_params_and_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let layer = NormLayer::init(&mut store, "ln", NormKind::Layer, 6);
    *store.value_mut(layer.gamma) = uniform(&[6], 0.5, 1.5, &mut rng);
    let input: Tensor<f64> = uniform(&[4, 6], -2.0, 2.0, &mut rng);
    let w: Tensor<f64> = uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = layer.forward(tape, store, x, Mode::Train)?;
            weighted_sum(tape, y, &w)
        },
        &mut store,
        EPS,
        0,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "params: {err}");

    let err = gradcheck_inputs(
        |tape, ids| {
            let y = layer.forward(tape, &mut store, ids[0], Mode::Train)?;
            weighted_sum(tape, y, &w)
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "input: {err}");
}

#[test]
fn droppath_eval_mode_is_exactly_identity_under_gradcheck() {
    let dp = DropPath::new(0.3).unwrap();
    let input = Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1);
    let err = gradcheck_inputs(
        |tape, ids| {
            let y = dp.apply(tape, ids[0], Mode::Eval, None)?;
            Ok(tape.sum(y))
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn full_smlp_block_random_8x8x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let block = SmlpBlock::init(
        &mut store,
        &mut rng,
        "smlp",
        8,
        8,
        4,
        SmlpSettings::default(),
    );
    let input: Tensor<f64> = uniform(&[8, 8, 4], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[8, 8, 4], -1.0, 1.0, &mut rng);

    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = block.forward(tape, store, x)?;
            weighted_sum(tape, y, &w)
        },
        &mut store,
        EPS,
        0,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "params: {err}");

    let err = gradcheck_inputs(
        |tape, ids| {
            let y = block.forward(tape, &store, ids[0])?;
            weighted_sum(tape, y, &w)
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "input: {err}");
}

#[test]
fn smlp_block_all_topologies_and_fusions() {
    use smlp::arch::{FusionKind, Topology};
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for topology in [
        Topology::Parallel,
        Topology::SequentialHorizontalFirst,
        Topology::SequentialVerticalFirst,
    ] {
        for fusion in [
            FusionKind::ConcatFc,
            FusionKind::Sum,
            FusionKind::WeightedSum,
        ] {
            for identity_branch in [true, false] {
                let settings = SmlpSettings {
                    topology,
                    identity_branch,
                    fusion,
                };
                let mut store = ParamStore::<f64>::new();
                let block = SmlpBlock::init(&mut store, &mut rng, "smlp", 3, 4, 2, settings);
                let input: Tensor<f64> = uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
                let w: Tensor<f64> = uniform(&[3, 4, 2], -1.0, 1.0, &mut rng);
                let err = gradcheck_params(
                    |tape, store| {
                        let x = tape.leaf(input.clone());
                        let y = block.forward(tape, store, x)?;
                        weighted_sum(tape, y, &w)
                    },
                    &mut store,
                    EPS,
                    0,
                    &mut rng,
                )
                .unwrap();
                assert!(
                    err < TOL,
                    "{topology:?}/{fusion:?}/id={identity_branch}: {err}"
                );
            }
        }
    }
}

#[test]
fn scaled_tiny_model_at_32_single_logit() {
    // the tiny layout shrunk to 32x32 (depths 1,1,2,1, narrow channels),
    // differentiating one logit; BN in eval mode after a warmup pass
    use smlp::arch::{build_variant, Model, Overrides};
    let mut model: Model<f64> = build_variant(
        "smlpnet-t",
        &Overrides {
            resolution: Some((32, 32)),
            embed_dim: Some(8),
            depths: Some(vec![1, 1, 2, 1]),
            num_classes: Some(10),
            droppath: Some(0.0),
            ..Overrides::default()
        },
        21,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let input: Tensor<f64> = uniform(&[1, 32, 32, 3], 0.0, 1.0, &mut rng);
    {
        let mut tape = Tape64::new();
        let x = tape.leaf(input.clone());
        model.forward(&mut tape, x, Mode::Train, None).unwrap();
    }
    // one-logit selector: only logits[0, 0] reaches the loss
    let mut selector = Tensor::zeros(&[1, 10]);
    selector.data_mut()[0] = 1.0;
    let smlp::arch::Model { net, params, .. } = &mut model;
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let logits = net.forward(tape, store, x, Mode::Eval, None)?;
            weighted_sum(tape, logits, &selector)
        },
        params,
        EPS,
        6,
        &mut rng,
    )
    .unwrap();
    assert!(err < 1e-3, "params: {err}");

    let err = gradcheck_inputs(
        |tape, ids| {
            let logits = net.forward(tape, params, ids[0], Mode::Eval, None)?;
            weighted_sum(tape, logits, &selector)
        },
        &[input],
        EPS,
    )
    .unwrap();
    assert!(err < 1e-3, "input: {err}");
}

#[test]
fn token_mixing_module_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let module = TokenMixing::init(
        &mut store,
        &mut rng,
        "tok",
        4,
        4,
        3,
        &StageConfig::smlp(1),
        DropPath::new(0.0).unwrap(),
    );
    // non-trivial conv weights
    let conv = module.dwconv.as_ref().unwrap();
    *store.value_mut(conv.kernel) = uniform(&[3, 3, 3], -0.5, 0.5, &mut rng);
    let input: Tensor<f64> = uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng);
    let w: Tensor<f64> = uniform(&[2, 4, 4, 3], -1.0, 1.0, &mut rng);
    let err = gradcheck_params(
        |tape, store| {
            let x = tape.leaf(input.clone());
            let y = module.forward(tape, store, x, Mode::Eval, None)?;
            weighted_sum(tape, y, &w)
        },
        &mut store,
        EPS,
        0,
        &mut rng,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

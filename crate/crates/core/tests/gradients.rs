//! Backward passes against central finite differences.

use fedsplit::nn::{finite_difference_grad, Cache, EncoderDims, Layer, LayerSpec};
use fedsplit::rng::{domain, stream};
use fedsplit::split::{backward_chain, full_loss, ClientModel, Encoder, ModelDims, StepTag};
use fedsplit::tensor::{flatten_grads, flatten_values, load_values, relative_error};
use fedsplit::Tensor;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

/// Loss `⟨w_out, layer(x)⟩` for a fixed random `w_out`, so the upstream
/// gradient is `w_out`.
fn check_layer(spec: LayerSpec, input_shape: &[usize], seed: u64) {
    let mut rng = stream(seed, domain::PROBE, &[42]);
    let mut layer = Layer::build(spec, &mut rng).unwrap();
    let x = Tensor::randn(input_shape, 1.0, &mut rng);
    let mut cache = Cache::Empty;
    let y = layer.forward(&x, &mut cache).unwrap();
    let w_out = Tensor::randn(y.shape(), 1.0, &mut rng);
    let dot = |t: &Tensor| t.data().iter().zip(w_out.data()).map(|(a, b)| a * b).sum::<f64>();

    let input_grad = layer.backward(&cache, &w_out).unwrap();
    let fd_input = finite_difference_grad(
        |xi| {
            let xt = Tensor::new(input_shape.to_vec(), xi.to_vec())?;
            Ok(dot(&layer.forward(&xt, &mut Cache::Empty)?))
        },
        x.data(),
        STEP,
    )
    .unwrap();
    let err = relative_error(input_grad.data(), &fd_input);
    assert!(err <= TOL, "{spec:?} seed {seed}: input grad rel err {err:e}");

    let params = flatten_values(layer.params());
    if params.is_empty() {
        return;
    }
    let analytic = flatten_grads(layer.params());
    let mut probe = layer.clone();
    let fd_params = finite_difference_grad(
        |w| {
            load_values(probe.params_mut(), w)?;
            Ok(dot(&probe.forward(&x, &mut Cache::Empty)?))
        },
        &params,
        STEP,
    )
    .unwrap();
    let err = relative_error(&analytic, &fd_params);
    assert!(err <= TOL, "{spec:?} seed {seed}: param grad rel err {err:e}");
}

#[test]
fn linear_layer_matches_finite_differences() {
    for seed in 0..5 {
        check_layer(LayerSpec::Linear { input: 5, output: 3 }, &[4, 5], seed);
    }
}

#[test]
fn relu_layer_matches_finite_differences() {
    for seed in 0..5 {
        check_layer(LayerSpec::Relu, &[3, 7], seed);
    }
}

#[test]
fn encoder_block_matches_finite_differences() {
    let dims = EncoderDims {
        tokens: 4,
        width: 6,
        attn_width: 5,
        mlp_width: 8,
    };
    for seed in 0..5 {
        check_layer(LayerSpec::EncoderBlock(dims), &[3, 4, 6], seed);
    }
}

#[test]
fn full_split_chain_matches_finite_differences() {
    let dims = ModelDims::desk_scale(4);
    for seed in 0..5 {
        let mut rng = stream(seed, domain::PROBE, &[7]);
        let mut client = ClientModel::init(dims, seed, 0).unwrap();
        let mut encoder = Encoder::init(dims, seed).unwrap();
        let x = Tensor::randn(&[3, 64], 1.0, &mut rng);
        let labels = vec![0, 3, 1];

        let tag = StepTag { client_id: 0, round: 0, step: 1 };
        let (fb, ht) = client.head_forward(tag, &x).unwrap();
        let (sb, et) = encoder.forward_features(&fb).unwrap();
        let (loss, tt) = client.tail_forward_loss(&sb, &labels).unwrap();
        assert_eq!(loss, full_loss(&client, &encoder, &x, &labels).unwrap());
        let g = backward_chain(&mut client, &mut encoder, &ht, &et, &tt).unwrap();

        let mut analytic = g.head.clone();
        analytic.extend(&g.encoder);
        analytic.extend(&g.tail);
        let mut w = flatten_values(client.head_params());
        w.extend(encoder.flat_values());
        w.extend(flatten_values(client.tail_params()));

        let (nh, ne) = (dims.head_param_count(), dims.encoder_param_count());
        let mut c = client.clone();
        let mut e = encoder.clone();
        let fd = finite_difference_grad(
            |v| {
                load_values(c.head.params_mut(), &v[..nh])?;
                e.load_flat(&v[nh..nh + ne])?;
                load_values(c.tail.params_mut(), &v[nh + ne..])?;
                full_loss(&c, &e, &x, &labels)
            },
            &w,
            STEP,
        )
        .unwrap();
        let err = relative_error(&analytic, &fd);
        assert!(err <= TOL, "seed {seed}: chain rel err {err:e}");
    }
}

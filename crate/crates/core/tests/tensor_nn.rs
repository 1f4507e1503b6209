mod common;

use common::{random_tensor, rng};
use fedlps::nn::{
    backward, cross_entropy, forward, infer, sgd_step, stack_output_shape, LayerSpec, LayerStack,
    ParamKey, ParameterTree,
};
use fedlps::{Error, Tensor};
use proptest::prelude::*;

fn single(key: ParamKey, value: f64) -> ParameterTree {
    let mut t = ParameterTree::new();
    t.insert(key, Tensor::from_slice(&[1], &[value]).unwrap());
    t
}

#[test]
fn sgd_step_examples() {
    let key = ParamKey::weight(0);
    let mut p = single(key, 1.0);
    sgd_step(&mut p, &single(key, 0.5), 0.1, 0.0).unwrap();
    assert_eq!(p.get(&key).unwrap().data(), &[0.95]);

    let mut p = single(key, 1.0);
    sgd_step(&mut p, &single(key, 0.0), 0.1, 0.0).unwrap();
    assert_eq!(p.get(&key).unwrap().data(), &[1.0]);

    let mut p = single(key, 1.0);
    sgd_step(&mut p, &single(key, 0.0), 0.1, 0.001).unwrap();
    assert!((p.get(&key).unwrap().data()[0] - 0.9999).abs() < 1e-15);
}

#[test]
fn sgd_step_rejects_mismatched_trees() {
    let mut p = single(ParamKey::weight(0), 1.0);
    let err = sgd_step(&mut p, &single(ParamKey::weight(1), 0.5), 0.1, 0.0).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err:?}");
}

#[test]
fn cross_entropy_examples() {
    let k = 7;
    let logits = Tensor::zeros(&[2, k]);
    let (loss, _) = cross_entropy(&logits, &[0, 3]).unwrap();
    assert!((loss - (k as f64).ln()).abs() < 1e-12);

    let logits = Tensor::from_slice(&[1, 3], &[100.0, 0.0, 0.0]).unwrap();
    let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
    assert!(loss.abs() < 1e-10);

    let logits = Tensor::from_slice(&[1, 2], &[0.0, 0.0]).unwrap();
    let (loss, grad) = cross_entropy(&logits, &[0]).unwrap();
    assert_eq!(grad.data(), &[-0.5, 0.5]);
    // Finite-difference check of the same gradient.
    let h = 1e-6;
    for j in 0..2 {
        let mut plus = logits.clone();
        plus.data_mut()[j] += h;
        let (lp, _) = cross_entropy(&plus, &[0]).unwrap();
        assert!(((lp - loss) / h - grad.data()[j]).abs() < 1e-5);
    }

    assert!(matches!(cross_entropy(&logits, &[2]), Err(Error::Input(_))));
}

#[test]
fn forward_and_backward_are_deterministic() {
    let layers = vec![
        LayerSpec::conv(2, 3, 3, 1),
        LayerSpec::BatchNorm { channels: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool {
            kernel: 2,
            stride: 2,
        },
        LayerSpec::Flatten,
        LayerSpec::linear(12, 4),
    ];
    let stack = LayerStack::new(0, layers);
    let run = || {
        let mut r = rng(3);
        let params = stack.init_params(&mut r);
        let x = random_tensor(&[5, 2, 4, 4], &mut r);
        let (y, tape) = forward(&stack, &params, &x).unwrap();
        let g = backward(tape, &Tensor::full(y.shape(), 1.0)).unwrap();
        (y, g)
    };
    let (y1, g1) = run();
    let (y2, g2) = run();
    assert!(y1.bit_eq(&y2));
    assert!(g1.bit_eq(&g2));
}

#[test]
fn gradients_cover_exactly_trainable_layers() {
    let layers = vec![
        LayerSpec::linear(3, 4),
        LayerSpec::Relu,
        LayerSpec::linear(4, 2),
    ];
    let stack = LayerStack::new(0, layers);
    let params = stack.init_params(&mut rng(1));
    let x = random_tensor(&[2, 3], &mut rng(2));
    let (y, tape) = forward(&stack, &params, &x).unwrap();
    let g = backward(tape, &Tensor::full(y.shape(), 1.0)).unwrap();
    assert!(g.same_structure(&params));
    assert!(g.keys().all(|k| k.layer != 1));
}

fn arb_layer(input: Vec<usize>) -> BoxedStrategy<(LayerSpec, Vec<usize>)> {
    match *input.as_slice() {
        [c, h, w] => {
            let smallest = h.min(w);
            prop_oneof![
                (1usize..5, 1usize..4, 1usize..3, 0usize..2).prop_filter_map(
                    "kernel must fit",
                    move |(co, k, s, p)| {
                        (k <= smallest + 2 * p).then(|| {
                            let ho = (h + 2 * p - k) / s + 1;
                            let wo = (w + 2 * p - k) / s + 1;
                            (
                                LayerSpec::Conv2d {
                                    in_channels: c,
                                    out_channels: co,
                                    kernel: k,
                                    stride: s,
                                    padding: p,
                                },
                                vec![co, ho, wo],
                            )
                        })
                    }
                ),
                (1usize..3, 1usize..3).prop_filter_map("pool must fit", move |(k, s)| {
                    (k <= smallest).then(|| {
                        (
                            LayerSpec::MaxPool {
                                kernel: k,
                                stride: s,
                            },
                            vec![c, (h - k) / s + 1, (w - k) / s + 1],
                        )
                    })
                }),
                (1usize..3, 1usize..3).prop_filter_map("pool must fit", move |(k, s)| {
                    (k <= smallest).then(|| {
                        (
                            LayerSpec::AvgPool {
                                kernel: k,
                                stride: s,
                            },
                            vec![c, (h - k) / s + 1, (w - k) / s + 1],
                        )
                    })
                }),
                Just((LayerSpec::BatchNorm { channels: c }, vec![c, h, w])),
                Just((LayerSpec::Relu, vec![c, h, w])),
                Just((LayerSpec::Flatten, vec![c * h * w])),
            ]
            .boxed()
        }
        [d] => prop_oneof![
            (1usize..6).prop_map(move |o| (LayerSpec::linear(d, o), vec![o])),
            Just((LayerSpec::Relu, vec![d])),
        ]
        .boxed(),
        _ => unreachable!(),
    }
}

fn arb_stack(depth: usize) -> BoxedStrategy<(Vec<usize>, Vec<LayerSpec>, Vec<usize>)> {
    let start = (1usize..4, 3usize..8, 3usize..8)
        .prop_map(|(c, h, w)| (vec![c, h, w], Vec::new(), vec![c, h, w]));
    let mut s: BoxedStrategy<(Vec<usize>, Vec<LayerSpec>, Vec<usize>)> = start.boxed();
    for _ in 0..depth {
        s = s
            .prop_flat_map(|(input, layers, shape)| {
                arb_layer(shape).prop_map(move |(l, out)| {
                    let mut layers = layers.clone();
                    layers.push(l);
                    (input.clone(), layers, out)
                })
            })
            .boxed();
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_shape_matches_shape_function((input, layers, expected) in arb_stack(4), batch in 1usize..4) {
        prop_assert_eq!(stack_output_shape(&layers, 0, &input).unwrap(), expected.clone());
        let stack = LayerStack::new(0, layers);
        let mut r = rng(9);
        let params = stack.init_params(&mut r);
        let mut shape = vec![batch];
        shape.extend_from_slice(&input);
        let y = infer(&stack, &params, &random_tensor(&shape, &mut r)).unwrap();
        prop_assert_eq!(y.sample_shape(), expected.as_slice());
        prop_assert!(y.is_finite());
    }
}

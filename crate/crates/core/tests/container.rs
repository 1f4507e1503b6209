mod common;

use std::collections::BTreeMap;

use common::{fixture, tiny_config};
use fedlps::container::{
    decode_backbone, decode_checkpoint, decode_mask, encode_backbone, encode_checkpoint,
    encode_mask, MaskRecord,
};
use fedlps::harness::build_federation;
use fedlps::model::{desk_backbone_layers, BackboneModel};
use fedlps::pruning::{expand_channels, ChannelMask, Owner};
use fedlps::Error;
use proptest::prelude::*;

#[test]
fn desk_backbone_round_trips() {
    let b = BackboneModel::fresh(
        desk_backbone_layers(&[3, 12, 12], 10).unwrap(),
        vec![3, 12, 12],
        5,
    )
    .unwrap();
    let bytes = encode_backbone(&b);
    let back = decode_backbone(&bytes).unwrap();
    assert_eq!(back.stack, b.stack);
    assert_eq!(back.input_shape, b.input_shape);
    assert_eq!(back.provenance, b.provenance);
    assert!(back.weights.bit_eq(&b.weights));
    assert_eq!(encode_backbone(&back), bytes);
}

#[test]
fn every_truncation_is_a_format_error() {
    let b = BackboneModel::fresh(
        vec![
            fedlps::nn::LayerSpec::linear(3, 2),
            fedlps::nn::LayerSpec::Relu,
        ],
        vec![3],
        1,
    )
    .unwrap();
    let bytes = encode_backbone(&b);
    for cut in 0..bytes.len() {
        match decode_backbone(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
            other => panic!("prefix of {cut} bytes: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_backbone(&extra), Err(Error::Format { .. })));
    let mut bad = bytes;
    bad[0] ^= 0xff;
    assert!(matches!(
        decode_backbone(&bad),
        Err(Error::Format { offset: 0, .. })
    ));
}

#[test]
fn checkpoint_restores_globals_and_masks() {
    let config = tiny_config("fedlps");
    let (datasets, backbone) = fixture(&config);
    let mut fed = build_federation(&config, datasets, &backbone).unwrap();
    fed.run_round().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut c = config.clone();
    c.output_dir = dir.path().to_path_buf();
    let outcome = fedlps::harness::run_with(&c, fixture(&config).0, &backbone).unwrap();
    let cp =
        decode_checkpoint(&std::fs::read(outcome.dir.join("checkpoint.bin")).unwrap()).unwrap();
    assert_eq!(cp.round, 1);
    assert_eq!(cp.framework, "fedlps");
    assert_eq!(cp.predictor, fed.setup.template.stack);
    for (t, tree) in &fed.state.globals {
        assert!(cp.globals[t].bit_eq(tree));
    }
    assert_eq!(cp.masks.len(), 4 * 2);
    for record in cp.masks {
        let owner = record.owner;
        let mask = record.expand(&cp.predictor, &cp.input_shape).unwrap();
        assert!(mask.same_support(&fed.clients[owner.client].masks[&owner.task]));
    }
    assert_eq!(
        encode_checkpoint(&decode_checkpoint(&encode_checkpoint(&checkpoint_like(&fed))).unwrap()),
        encode_checkpoint(&checkpoint_like(&fed))
    );
}

fn checkpoint_like(fed: &fedlps::federation::Federation) -> fedlps::container::Checkpoint {
    fedlps::container::Checkpoint {
        round: fed.state.round,
        framework: "fedlps".into(),
        predictor: fed.setup.template.stack.clone(),
        input_shape: fed.setup.template.input_shape.clone(),
        globals: fed.state.globals.clone(),
        masks: fed
            .clients
            .iter()
            .flat_map(|c| c.masks.values().map(MaskRecord::of))
            .collect(),
    }
}

fn arb_channels() -> impl Strategy<Value = BTreeMap<usize, Vec<bool>>> {
    prop::collection::btree_map(
        0usize..40,
        prop::collection::vec(any::<bool>(), 1..70),
        0..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mask_records_round_trip(client in 0usize..1000, task in 0usize..50, ratio in 0.0f64..1.0, channels in arb_channels()) {
        let record = MaskRecord { owner: Owner { client, task }, ratio, channels: channels.clone() };
        let mask = ChannelMask {
            owner: record.owner,
            ratio,
            channels,
            elements: fedlps::nn::ParameterTree::new(),
        };
        let bytes = encode_mask(&mask);
        let back = decode_mask(&bytes).unwrap();
        prop_assert_eq!(&back, &record);
        prop_assert_eq!(back.ratio.to_bits(), ratio.to_bits());
    }

    #[test]
    fn desk_masks_re_expand_identically(seed in 0u64..500, ratio_idx in 0usize..5) {
        let ratio = [0.0, 0.2, 0.4, 0.6, 0.8][ratio_idx];
        let b = BackboneModel::fresh(desk_backbone_layers(&[3, 12, 12], 10).unwrap(), vec![3, 12, 12], seed).unwrap();
        let (_, p) = fedlps::model::split_backbone(&b, 0.25).unwrap();
        let scores = fedlps::pruning::channel_importance(&p).unwrap();
        let mask = fedlps::pruning::build_mask(&p, &scores, ratio, Owner { client: 1, task: 2 }).unwrap();
        let back = decode_mask(&encode_mask(&mask)).unwrap().expand(&p.stack, &p.input_shape).unwrap();
        prop_assert!(back.same_support(&mask));
        prop_assert!(expand_channels(&p.stack, &p.input_shape, &back.channels).unwrap().bit_eq(&mask.elements));
    }
}

use std::collections::HashSet;

use midccnn::checkpoint::{load_checkpoint, save_checkpoint};
use midccnn::data::{stratified_split, synth_generate};
use midccnn::eval::{protocol, ProtocolSeeds, ProtocolSpec};
use midccnn::train::{train, TrainConfig};
use midccnn::{shape_plan, DccnnConfig, HeadKind, MilConfig, Network, PoolingMethod};
use proptest::prelude::*;

fn small_backbone() -> DccnnConfig {
    DccnnConfig {
        input_size: 64,
        init_channels: 8,
        growth_rate: 4,
        num_classes: 3,
        ..DccnnConfig::default()
    }
}

fn small_mil(method: PoolingMethod) -> MilConfig {
    MilConfig {
        hidden_dim: 8,
        method,
        ..MilConfig::default()
    }
}

fn short_training() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        stage_epochs: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn trained_model_survives_a_checkpoint_file() {
    let data = synth_generate(3, 3, 64, 1).unwrap();
    let mut net = Network::new(&small_backbone(), &small_mil(PoolingMethod::Attention)).unwrap();
    let outcome = train(&mut net, &data, &short_training()).unwrap();
    assert_eq!(outcome.history.len(), 4);
    assert!(outcome.history.iter().all(|r| r.mean_loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.midc");
    save_checkpoint(&path, &net, &data.class_names, Some(&short_training()), Some(&outcome.adam)).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.meta.class_names, data.class_names);

    let (x, _) = data.batch(&[0, 4, 8]);
    let before = net.predict(&x).unwrap();
    let after = loaded.network.predict(&x).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.p_bag, b.p_bag);
        assert_eq!(a.attention_weights, b.attention_weights);
    }
}

#[test]
fn protocol_is_reproducible_and_seeded_per_repetition() {
    let data = synth_generate(3, 4, 64, 2).unwrap();
    let spec = ProtocolSpec {
        dccnn: small_backbone(),
        mil: small_mil(PoolingMethod::Mean),
        train: TrainConfig {
            max_epochs: Some(1),
            ..short_training()
        },
        train_ratio: 0.5,
        repetitions: 2,
        seeds: ProtocolSeeds {
            split_base: 3,
            model_base: 9,
        },
    };
    let a = protocol(&data, &spec, |_| Ok(())).unwrap();
    let b = protocol(&data, &spec, |_| Ok(())).unwrap();
    assert_eq!(a.per_rep_oa, b.per_rep_oa);
    assert_eq!(a.per_rep_oa.len(), 2);
    let mut seen = Vec::new();
    protocol(&data, &spec, |r| {
        seen.push(r.rep);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![0, 1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_a_stratified_partition(per_class in 2usize..9, ratio in 0.1f64..0.9, seed in any::<u64>()) {
        let data = synth_generate(3, per_class, 32, 0).unwrap();
        let (tr, te) = stratified_split(&data, ratio, seed).unwrap();
        prop_assert_eq!(tr.len() + te.len(), data.len());
        let ids: HashSet<_> = tr.items.iter().chain(&te.items).map(|i| i.source_id.clone()).collect();
        prop_assert_eq!(ids.len(), data.len());
        for (c, (a, b)) in tr.class_counts().iter().zip(te.class_counts()).enumerate() {
            prop_assert_eq!(a + b, per_class, "class {}", c);
            prop_assert!(*a >= 1 && b >= 1);
        }
    }

    #[test]
    fn shape_plan_halves_and_grows(mult in 2usize..9, c0 in 1usize..32, k in 1usize..16) {
        let cfg = DccnnConfig {
            input_size: 32 * mult,
            init_channels: c0,
            growth_rate: k,
            head: HeadKind::GapFc,
            ..DccnnConfig::default()
        };
        let plan = shape_plan(&cfg).unwrap();
        let refine = plan.stage("refine").unwrap();
        prop_assert_eq!(refine.height, mult);
        prop_assert_eq!(refine.width, mult);
        for (i, len) in cfg.block_lengths.iter().enumerate() {
            let block = plan.stage(&format!("dense_block_{}", i + 1)).unwrap();
            let trans = plan.stage(&format!("transition_{}", i + 1)).unwrap();
            prop_assert_eq!(trans.channels, block.channels);
            prop_assert_eq!(trans.height * 2, block.height);
            prop_assert!(block.channels >= c0 + len * k);
        }
        prop_assert_eq!(plan.stage("fc").unwrap().channels, cfg.num_classes);
    }
}

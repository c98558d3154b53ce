use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use stylemix_core::checkpoint::Checkpoint;
use stylemix_core::fusion_net::TOY_ALIGN_LAYERS;
use stylemix_core::generator::ToyGenerator;
use stylemix_core::hierarchy::{build_tree, CompositionRequest, FusionTree, Topology};
use stylemix_core::segmentation::{fit_region_model, Labeling, RegionModel, SegmentConfig};
use stylemix_core::style_space::{sample_z, SamplerConfig, StyleCode};
use stylemix_core::training::TrainConfig;

fn model(g: &ToyGenerator) -> RegionModel {
    let config = SegmentConfig {
        num_images: 6,
        sample_points: Some(1200),
        ..SegmentConfig::default()
    };
    fit_region_model(g, &config, &Labeling::Auto).unwrap()
}

fn codes(g: &ToyGenerator, seed: u64, n: usize) -> Vec<StyleCode> {
    sample_z(&SamplerConfig::new(seed), n)
        .unwrap()
        .iter()
        .map(|z| g.map_to_style(z, 0.7).unwrap())
        .collect()
}

fn uniform(tree: &FusionTree, s: &StyleCode) -> CompositionRequest {
    CompositionRequest {
        region_codes: tree.regions.iter().map(|r| (r.clone(), s.clone())).collect(),
        global_codes: tree.nodes.keys().map(|k| (k.clone(), s.clone())).collect(),
        bypass: BTreeSet::new(),
    }
}

#[test]
fn trained_tree_survives_a_checkpoint() {
    let g = ToyGenerator::build(4);
    let m = model(&g);
    let mut tree = build_tree(&Topology::toy(), g.layout(), Some(TOY_ALIGN_LAYERS), 1).unwrap();
    let configs = BTreeMap::from([("*".to_string(), TrainConfig::toy().with_steps([4, 4, 4]).with_seed(1))]);
    let log = tree.train(&configs, &g, &m).unwrap();
    assert!(!log.to_jsonl().is_empty());

    let c = codes(&g, 9, 5);
    let req = CompositionRequest {
        region_codes: tree.regions.iter().cloned().zip(c.iter().cloned()).collect(),
        global_codes: tree.nodes.keys().map(|k| (k.clone(), c[4].clone())).collect(),
        bypass: BTreeSet::new(),
    };
    let (s, image) = tree.compose(&g, &req).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = Checkpoint {
        generator: Some(g.clone()),
        region_model: Some(m),
        tree: Some(tree),
        configs,
        ..Checkpoint::default()
    };
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let tree = back.require_tree().unwrap();
    let (s2, image2) = tree.compose(back.require_generator().unwrap(), &req).unwrap();
    assert_eq!(s, s2);
    assert_eq!(image, image2);
}

#[test]
fn bypassing_the_root_returns_its_code() {
    let g = ToyGenerator::build(4);
    let tree = build_tree(&Topology::toy(), g.layout(), Some(TOY_ALIGN_LAYERS), 2).unwrap();
    let c = codes(&g, 3, 2);
    let mut req = uniform(&tree, &c[0]);
    req.bypass.insert("root".into());
    req.region_codes.insert("root".into(), c[1].clone());
    assert_eq!(tree.compose_code(&req).unwrap(), c[1]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn uniform_requests_reproduce_the_code(tree_seed in 0u64..1000, code_seed in 0u64..1000) {
        let g = ToyGenerator::build(4);
        let tree = build_tree(&Topology::toy(), g.layout(), Some(TOY_ALIGN_LAYERS), tree_seed).unwrap();
        let s = codes(&g, code_seed, 1).remove(0);
        let out = tree.compose_code(&uniform(&tree, &s)).unwrap();
        prop_assert!(out.max_abs_diff(&s) <= 1e-9);
    }
}

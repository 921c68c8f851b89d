mod common;

use common::criteria;
use kneegrade_core::attention::CbamConfig;
use kneegrade_core::backbone::{build_network, forward, ForwardOptions, NetworkConfig};
use kneegrade_core::params::ParamKind;
use kneegrade_core::{Error, Tensor};

#[test]
fn branches_scales_gates_and_counts() {
    let v = criteria::topology();
    assert!(v.pass, "{}", v.detail);
}

#[test]
fn fusion_has_every_pair() {
    let cfg = NetworkConfig::toy();
    let params = build_network::<f32>(&cfg, 0).unwrap();
    for stage in 2..=4usize {
        let pairs = params
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(&format!("stage{stage}.fuse.")))
            .filter_map(|rest| rest.split('.').next())
            .collect::<std::collections::BTreeSet<_>>();
        assert_eq!(pairs.len(), stage * (stage - 1), "stage {stage}: {pairs:?}");
    }
    assert!(params.iter().all(|(n, _)| !n.starts_with("stage1.fuse")));
}

#[test]
fn param_store_matches_specs() {
    for cfg in [NetworkConfig::toy(), NetworkConfig::default()] {
        let params = build_network::<f32>(&cfg, 1).unwrap();
        params.validate(&cfg.param_specs().unwrap()).unwrap();
        let trainable: usize = params
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(_, p)| p.value.numel())
            .sum();
        assert_eq!(trainable, cfg.trainable_count().unwrap());
    }
}

#[test]
fn cbam_count_formula() {
    let c = CbamConfig::default();
    // Two bias-free C×C/16 layers and a 2-in, 1-out 7×7 kernel.
    assert_eq!(c.param_count(256).unwrap(), 2 * 256 * 16 + 2 * 49);
    let biased = CbamConfig { mlp_bias: true, ..c };
    assert_eq!(biased.param_count(256).unwrap(), 2 * 256 * 16 + 2 * 49 + 16 + 256);
    assert!(matches!(c.param_count(40), Err(Error::Config(_))));
}

#[test]
fn wrong_input_size_is_a_dimension_error() {
    let cfg = NetworkConfig::toy();
    let params = build_network::<f32>(&cfg, 0).unwrap();
    let x = Tensor::<f32>::zeros(&[1, 3, 32, 32]);
    assert!(matches!(forward(&cfg, &params, &x, ForwardOptions::eval()), Err(Error::Dimension(_))));
}

#[test]
fn identity_attention_matches_attention_off_features() {
    let cfg = NetworkConfig::toy();
    let params = build_network::<f32>(&cfg, 4).unwrap();
    let x = Tensor::<f32>::new(&[1, 3, 64, 64], (0..3 * 64 * 64).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect()).unwrap();
    let opts = ForwardOptions {
        identity_attention: true,
        ..ForwardOptions::eval()
    };
    let (fw, _) = forward(&cfg, &params, &x, opts).unwrap();
    let merged = fw.graph.value(fw.tapped("merged").unwrap()).clone();
    let attended = fw.graph.value(fw.tapped("attended").unwrap()).clone();
    assert_eq!(merged, attended);
    assert!(fw.tapped("cbam.channel_map").is_none());
}

use proptest::prelude::*;
use rebirth_core::fixtures;
use rebirth_core::graph::{load_model, parse_model, save_model, write_model, ModelIoError};
use rebirth_core::LayerKind;

fn weight_bits(g: &rebirth_core::ModelGraph) -> Vec<(String, Vec<u32>)> {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    g.nodes()
        .filter_map(|n| {
            let b = match &n.kind {
                LayerKind::Conv(p) => [bits(p.weights.data()), bits(&p.bias)].concat(),
                LayerKind::InnerProduct(p) => [bits(&p.weights), bits(&p.bias)].concat(),
                LayerKind::BatchNorm(p) => [bits(&p.mean), bits(&p.var), vec![p.eps.to_bits()]].concat(),
                LayerKind::Scale(p) => [bits(&p.gamma), bits(&p.beta)].concat(),
                _ => return None,
            };
            Some((n.id.clone(), b))
        })
        .collect()
}

#[test]
fn every_fixture_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for (name, g) in fixtures::all(7) {
        let m = dir.path().join(format!("{name}.json"));
        let w = dir.path().join(format!("{name}.bin"));
        save_model(&g, &m, &w).unwrap();
        let back = load_model(&m, &w).unwrap();
        assert_eq!(back, g, "{name}");
        assert_eq!(weight_bits(&back), weight_bits(&g), "{name}");
        let (text, blob) = write_model(&back).unwrap();
        assert_eq!(text, std::fs::read_to_string(&m).unwrap(), "{name}");
        assert_eq!(blob, std::fs::read(&w).unwrap(), "{name}");
    }
}

#[test]
fn slim_models_round_trip() {
    let g = fixtures::alexnet_mini(1);
    let plan = rebirth_core::slim::build_slim_plan(&g, &Default::default()).unwrap();
    let (slim, _) = rebirth_core::slim::apply_plan(&g, &plan).unwrap();
    let (text, blob) = write_model(&slim).unwrap();
    assert_eq!(parse_model(&text, &blob).unwrap(), slim);
}

#[test]
fn negative_zero_and_subnormals_survive() {
    let mut g = fixtures::pool_fixture(0);
    let p = g.node_mut("conv").unwrap().kind.as_conv_mut().unwrap();
    p.weights.data_mut()[0] = -0.0;
    p.weights.data_mut()[1] = f32::from_bits(1);
    p.bias[0] = f32::MAX;
    let (text, blob) = write_model(&g).unwrap();
    let back = parse_model(&text, &blob).unwrap();
    assert_eq!(weight_bits(&back), weight_bits(&g));
}

#[test]
fn truncated_or_padded_weights_are_rejected() {
    let (text, blob) = write_model(&fixtures::pool_fixture(0)).unwrap();
    assert!(matches!(
        parse_model(&text, &blob[..blob.len() - 4]),
        Err(ModelIoError::BlobLength { .. })
    ));
    let mut longer = blob.clone();
    longer.extend_from_slice(&[0; 4]);
    assert!(matches!(parse_model(&text, &longer), Err(ModelIoError::BlobSize { .. })));
}

#[test]
fn malformed_manifests_are_rejected() {
    let (text, blob) = write_model(&fixtures::pool_fixture(0)).unwrap();
    assert!(matches!(parse_model("{", &blob), Err(ModelIoError::Parse { .. })));
    let wrong_version = text.replacen("\"version\": 1", "\"version\": 9", 1);
    assert!(matches!(parse_model(&wrong_version, &blob), Err(ModelIoError::Format { .. })));
    let unknown_kind = text.replacen("\"Pool\"", "\"Warp\"", 1);
    assert!(parse_model(&unknown_kind, &blob).is_err());
    let dangling = text.replacen("\"conv\"\n", "\"nowhere\"\n", 1);
    if dangling != text {
        assert!(parse_model(&dangling, &blob).is_err());
    }
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("absent.json");
    let err = load_model(&m, &dir.path().join("absent.bin")).unwrap_err();
    assert!(err.to_string().contains("absent.json"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn seeded_fixtures_round_trip(seed in any::<u64>(), in_c in 1usize..4, out_c in 1usize..5, k in 1usize..4, with_scale: bool) {
        let g = fixtures::conv_bn_scale(seed, in_c, out_c, k, with_scale, 1e-5);
        let (text, blob) = write_model(&g).unwrap();
        let back = parse_model(&text, &blob).unwrap();
        prop_assert_eq!(weight_bits(&back), weight_bits(&g));
        prop_assert_eq!(back, g);
    }
}

use rebirth_core::fixtures;
use rebirth_core::profile::{nontensor_fraction, speedup_report, time_forward, ProfileError};
use rebirth_core::LayerKind;

#[test]
fn report_accounts_for_every_layer() {
    let g = fixtures::alexnet_mini(0);
    let r = time_forward(&g, g.input_shape().unwrap(), 3, 1).unwrap();
    assert_eq!(r.runs, 3);
    let ids: Vec<&str> = r.layers.iter().map(|l| l.id.as_str()).collect();
    let order = rebirth_core::graph::topo_order(&g).unwrap();
    let expected: Vec<&str> = order
        .iter()
        .map(String::as_str)
        .filter(|id| !matches!(g.node(id).unwrap().kind, LayerKind::Input(_)))
        .collect();
    assert_eq!(ids, expected);
    let sum: f64 = r.layers.iter().map(|l| l.best_ms).sum();
    assert!((sum - r.total_ms).abs() <= 1e-9 * r.total_ms.max(1.0));
    assert!((r.tensor_ms() + r.nontensor_ms() - r.total_ms).abs() <= 1e-9 * r.total_ms.max(1.0));
    assert!(r.layers.iter().all(|l| l.best_ms >= 0.0));
    for l in &r.layers {
        assert_eq!(l.is_tensor, matches!(l.kind.as_str(), "Conv" | "InnerProduct"), "{}", l.id);
    }
    let f = nontensor_fraction(&r).unwrap();
    assert!(f > 0.0 && f <= 1.0);
}

#[test]
fn structure_is_stable_across_runs() {
    let g = fixtures::pool_fixture(0);
    let a = time_forward(&g, g.input_shape().unwrap(), 1, 5).unwrap();
    let b = time_forward(&g, g.input_shape().unwrap(), 2, 5).unwrap();
    let shape = |r: &rebirth_core::profile::LatencyReport| {
        r.layers.iter().map(|l| (l.id.clone(), l.kind.clone(), l.is_tensor)).collect::<Vec<_>>()
    };
    assert_eq!(shape(&a), shape(&b));
    assert!(a.to_text().starts_with("# latency report: runs=1 seed=5\n"));
    assert_eq!(a.to_csv().lines().count(), 3);
}

#[test]
fn zero_runs_is_an_error() {
    let g = fixtures::pool_fixture(0);
    assert!(matches!(
        time_forward(&g, g.input_shape().unwrap(), 0, 0),
        Err(ProfileError::NoRuns)
    ));
}

#[test]
fn speedup_table_has_a_fixed_layout() {
    let g = fixtures::alexnet_mini(0);
    let plan = rebirth_core::slim::build_slim_plan(&g, &Default::default()).unwrap();
    let (slim, _) = rebirth_core::slim::apply_plan(&g, &plan).unwrap();
    let shape = g.input_shape().unwrap();
    let before = time_forward(&g, shape, 2, 0).unwrap();
    let after = time_forward(&slim, shape, 2, 0).unwrap();
    let table = speedup_report(&before, &after);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), before.layers.len() + 2);
    assert!(lines[0].starts_with("layer"));
    assert!(lines[0].ends_with("speed-up"));
    for id in ["norm1", "pool1", "norm2", "pool2"] {
        let row = lines.iter().find(|l| l.split_whitespace().next() == Some(id)).unwrap();
        assert!(row.contains("removed"), "{row}");
    }
    let total = lines.last().unwrap();
    assert!(total.starts_with("Total"));
    assert!(total.trim_end().ends_with("x)"));
}

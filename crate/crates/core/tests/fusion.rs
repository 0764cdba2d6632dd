use docsynth::catalog::{ClusterClass, LayerRole};
use docsynth::docgen::GenConfig;
use docsynth::pipeline::fusion_oracle;
use docsynth::GenSeed;

/// On noiseless features the oracle catalog finds, in every semantic layer,
/// at least one cluster for each class present in the corpus.
#[test]
fn every_semantic_layer_separates_all_classes() {
    let config = GenConfig { feature_noise_sigma: 0.0, ..GenConfig::default() };
    let report = fusion_oracle(
        30,
        GenSeed(11),
        &config,
        &docsynth::clustering::KMeansConfig::default(),
        50_000,
    )
    .unwrap();
    let semantic: Vec<_> =
        report.catalog.layers.iter().filter(|l| l.role == LayerRole::Semantic).collect();
    assert!(!semantic.is_empty());
    for layer in semantic {
        for class in [ClusterClass::Background, ClusterClass::Printed, ClusterClass::Handwritten] {
            assert!(
                layer.clusters.iter().any(|c| c.class == class),
                "layer {} has no {class:?} cluster",
                layer.layer_id
            );
        }
    }
    let structural: Vec<_> =
        report.catalog.layers.iter().filter(|l| l.role == LayerRole::Structural).collect();
    for layer in structural {
        assert!(layer.clusters.iter().any(|c| c.class == ClusterClass::Text));
        assert!(layer.clusters.iter().any(|c| c.class == ClusterClass::Background));
    }
    // Contingency rows: truth text is mostly recovered with the right class.
    let c = report.contingency;
    assert!(c[1][1] as f64 > 0.9 * c[1].iter().sum::<u64>() as f64, "{c:?}");
    assert!(c[2][2] as f64 > 0.9 * c[2].iter().sum::<u64>() as f64, "{c:?}");
    assert!(report.agreement >= 0.95);
}

use gridfactor::analysis::{block_partition, centralized_baseline, BaselineConfig};
use gridfactor::builder::build_blueprint;
use gridfactor::datagen::{generate, mask_missing, Kind};
use gridfactor::nlpca::TrainConfig;
use gridfactor::trainer::{em_train, evaluate, EmConfig};

#[test]
fn baseline_and_graph_model_agree_on_a_tiny_system() {
    let ds = generate(2, 248, 4).unwrap();
    let part = block_partition(&ds.topology, 1).unwrap();
    let kinds = vec![Kind::P, Kind::Solar, Kind::Demand];
    let bp = build_blueprint(&part, &[kinds.clone(), kinds], &ds.noise).unwrap();
    assert_eq!(bp.joints.len(), 1);
    assert_eq!(bp.joints[0].d, 6);
    let train = ds.slice_hours(0, 200).unwrap();
    let test = mask_missing(&ds.slice_hours(200, 248).unwrap(), 0.1, 2).unwrap();
    let nlpca = TrainConfig {
        epochs: 1000,
        refine_rounds: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let config = BaselineConfig {
        nlpca: nlpca.clone(),
        ..BaselineConfig::default()
    };
    let base = centralized_baseline(&bp, &train, &test, &config).unwrap();
    assert_eq!(base.d, 6);
    assert_eq!(
        centralized_baseline(&bp, &train, &test, &config).unwrap(),
        base
    );

    let em = EmConfig {
        em_iters: 2,
        nlpca,
        seed: 5,
        ..EmConfig::default()
    };
    let graph = evaluate(&em_train(&bp, &train, &em).unwrap(), &test).unwrap();
    assert_eq!(graph.evaluated, base.evaluated);
    let ratio = graph.rmse / base.rmse;
    assert!(
        (0.5..=2.0).contains(&ratio),
        "graph {} vs centralized {}",
        graph.rmse,
        base.rmse
    );
}

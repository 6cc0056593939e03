use heunflow::autodiff::LossKind;
use heunflow::blocks::Family;
use heunflow::data::{load_mnist_idx, stratified_split, LabeledDataset};
use heunflow::training::{evaluate, train_classifier, Classifier, ModelSpec, OptimizerConfig, TrainConfig};
use heunflow::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_labels(n: usize, features: usize, classes: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * features).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
    LabeledDataset::new(Tensor::matrix(n, features, data).unwrap(), labels, classes).unwrap()
}

#[test]
fn uninformed_predictor_scores_chance() {
    // labels are drawn independently of the model, so accuracy ~ Binomial(n, 1/5) / n
    let ds = random_labels(10_000, 6, 5, 1);
    let model = Classifier::new(&ModelSpec::blocks(Family::Heun, 2, 8), 6, 5, 2).unwrap();
    let (_, acc) = evaluate(&model, &ds, LossKind::SoftmaxCrossEntropy).unwrap();
    assert!((acc - 0.2).abs() <= 0.03, "{acc}");
}

fn config(family: Family) -> TrainConfig {
    TrainConfig {
        model: ModelSpec::blocks(family, 2, 16),
        optimizer: OptimizerConfig::adam(1e-3),
        epochs: 3,
        batch_size: 32,
        seed: 9,
        loss: LossKind::SoftmaxCrossEntropy,
        record_wall_time: false,
    }
}

#[test]
fn held_out_split_never_influences_parameters() {
    let train = random_labels(200, 4, 3, 3);
    let test_a = random_labels(50, 4, 3, 4);
    let test_b = random_labels(80, 4, 3, 5);
    let a = train_classifier(&config(Family::Heun), &train, &test_a).unwrap();
    let b = train_classifier(&config(Family::Heun), &train, &test_b).unwrap();
    assert_eq!(a.model, b.model);
    let train_losses = |h: &heunflow::training::MetricsHistory| h.records.iter().map(|r| r.train_loss).collect::<Vec<_>>();
    assert_eq!(train_losses(&a.history), train_losses(&b.history));
}

#[test]
fn mnist_slice_loss_drops_over_three_epochs() {
    let dir = std::path::PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist");
    let pool = load_mnist_idx(
        dir.join("mnist10k-images-idx3-ubyte.gz"),
        dir.join("mnist10k-labels-idx1-ubyte.gz"),
    )
    .unwrap();
    let (train, test) = stratified_split(&pool, 600, 200, 0).unwrap();
    for family in [Family::Resnet, Family::Heun] {
        let run = train_classifier(&config(family), &train, &test).unwrap();
        let losses: Vec<f64> = run.history.records.iter().map(|r| r.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{}: {losses:?}", family.label());
        let iterations: Vec<usize> = run.history.records.iter().map(|r| r.iteration).collect();
        assert_eq!(iterations, vec![1, 2, 3]);
        assert!(run.history.records.iter().all(|r| (0.0..=1.0).contains(&r.eval_accuracy)));
    }
}

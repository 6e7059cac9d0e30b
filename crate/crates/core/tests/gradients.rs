use freqdrop_core::nn::{
    cross_entropy, train, unet_backward, unet_forward, Architecture, TrainOptions, UNetModel,
};
use freqdrop_core::rng::RngStream;
use freqdrop_core::synth::{generate_sample, GenParams};
use freqdrop_core::{ClassMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_problem(seed: u64, size: usize) -> (UNetModel, Tensor, ClassMap) {
    let arch = Architecture {
        in_channels: 1,
        base_channels: 2,
        depth: 1,
        class_count: 2,
        kernel_size: 3,
    };
    let model = UNetModel::new(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let input = Tensor::from_vec(
        &[1, size, size],
        (0..size * size).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let labels = (0..size * size).map(|_| rng.random_range(0..2u8)).collect();
    (model, input, ClassMap::new(size, size, labels).unwrap())
}

fn loss(model: &UNetModel, input: &Tensor, target: &ClassMap) -> f64 {
    let pred = unet_forward(model, input, None, RngStream::new(0, 0)).unwrap();
    cross_entropy(&pred.logits, target).unwrap().0
}

// Central differences are only meaningful away from ReLU and max-pool
// kinks, so the check runs on fixed points where none lie within ε.
#[test]
fn every_parameter_matches_central_differences() {
    let eps = 1e-3f32;
    for seed in [0u64, 4, 5, 6] {
        let (mut model, input, target) = toy_problem(seed, 6);
        let grads = unet_backward(&model, &input, &target).unwrap();
        let tensor_count = model.params().len();
        assert_eq!(grads.params.len(), tensor_count);
        let mut checked = 0;
        for t in 0..tensor_count {
            let len = model.params()[t].len();
            for i in 0..len {
                let orig = model.params()[t].data()[i];
                model.params_mut()[t].data_mut()[i] = orig + eps;
                let up = loss(&model, &input, &target);
                model.params_mut()[t].data_mut()[i] = orig - eps;
                let down = loss(&model, &input, &target);
                model.params_mut()[t].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * f64::from(eps));
                let analytic = f64::from(grads.params[t].data()[i]);
                let abs = (numeric - analytic).abs();
                let rel = abs / numeric.abs().max(analytic.abs()).max(1e-12);
                assert!(
                    abs <= 1e-4 || rel <= 2e-2,
                    "seed {seed} tensor {t} element {i}: analytic {analytic}, numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, model.parameter_count());
    }
}

#[test]
fn overfits_one_sample() {
    let params = GenParams {
        height: 16,
        width: 16,
        class_count: 2,
        blob_count: 1,
        ..GenParams::default()
    };
    let sample = generate_sample(5, &params).unwrap();
    let (input, target) = (sample.image, sample.mask);
    let arch = Architecture {
        base_channels: 4,
        depth: 1,
        class_count: 2,
        ..Architecture::default()
    };
    let mut model = UNetModel::new(arch, 5).unwrap();
    let before = loss(&model, &input, &target);
    let options = TrainOptions {
        epochs: 200,
        learning_rate: 0.1,
        momentum: 0.9,
        batch_size: 1,
        seed: 3,
    };
    let report = train(&mut model, &[(input.clone(), target.clone())], &options).unwrap();
    let after = loss(&model, &input, &target);
    assert!(after < 0.1 * before, "loss {before} -> {after}");
    assert_eq!(report.epoch_losses.len(), 200);
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let (mut model, input, target) = toy_problem(7, 4);
    let original = model.clone();
    let options = TrainOptions {
        epochs: 3,
        learning_rate: 0.0,
        ..TrainOptions::default()
    };
    train(&mut model, &[(input, target)], &options).unwrap();
    assert_eq!(model, original);
}

#[test]
fn same_seed_trains_identically() {
    let data: Vec<(Tensor, ClassMap)> = (0..5)
        .map(|s| {
            let (_, x, y) = toy_problem(s, 4);
            (x, y)
        })
        .collect();
    let options = TrainOptions {
        epochs: 4,
        batch_size: 2,
        ..TrainOptions::default()
    };
    let run = || {
        let (mut model, _, _) = toy_problem(11, 4);
        let report = train(&mut model, &data, &options).unwrap();
        (model, report)
    };
    assert_eq!(run(), run());
}

#[test]
fn single_sample_dataset_trains() {
    let (mut model, x, y) = toy_problem(3, 4);
    assert!(train(&mut model, &[(x, y)], &TrainOptions { epochs: 1, ..TrainOptions::default() }).is_ok());
}

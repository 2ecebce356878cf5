//! Analytic gradients of the full training objective against central finite
//! differences, in f64 on the 32×32 plan.

use malimg::dataset::{synth_corpus_sized, LabeledSample};
use malimg::losses::LossConfig;
use malimg::masking::MaskConfig;
use malimg::model::{init_model, ModelConfig, ModelParams, Network};
use malimg::trainer::{StepContext, TrainMode};
use rand::{Rng, SeedableRng};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn check(mode: TrainMode, loss: LossConfig, dropout: f64) {
    let mut model = ModelConfig::tiny(3);
    model.dropout_rate = dropout;
    let network = Network::new(&model).unwrap();
    let mask = MaskConfig {
        block_size: 8,
        mask_ratio: 0.5,
    };
    let corpus = synth_corpus_sized(3, 2, 5, 32).unwrap();
    let batch: Vec<&LabeledSample> = corpus.samples.iter().collect();
    // biases start at zero and masked pixels are zero, which would put
    // pre-activations exactly on the leaky kink; jitter to a generic point
    let mut student: ModelParams<f64> = init_model::<f32>(&model, 11).unwrap().cast();
    let mut jitter = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for v in student.tensors.iter_mut().flat_map(|t| t.data.iter_mut()) {
        *v += jitter.gen_range(-0.05..0.05);
    }
    // a distinct teacher so the regression term is not trivially zero
    let teacher: ModelParams<f64> = init_model::<f32>(&model, 12).unwrap().cast();
    let ctx = StepContext {
        network: &network,
        loss: &loss,
        mask: &mask,
        mode,
        seed: 3,
        step: 9,
    };
    let objective = |p: &ModelParams<f64>| {
        let r = ctx.batch_pass(p, &teacher, &batch, false).unwrap().report;
        match mode {
            TrainMode::Composite => r.composite,
            TrainMode::CeOnly => r.ce,
        }
    };
    let grads = ctx.batch_pass(&student, &teacher, &batch, true).unwrap().grads.unwrap();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (t, tensor) in student.tensors.iter().enumerate() {
        let picks = tensor.data.len().min(6);
        for _ in 0..picks {
            let i = rng.gen_range(0..tensor.data.len());
            let mut plus = student.clone();
            plus.tensors[t].data[i] += H;
            let mut minus = student.clone();
            minus.tensors[t].data[i] -= H;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * H);
            let an = grads.tensors[t].data[i];
            let err = (fd - an).abs();
            worst = worst.max(err);
            assert!(err <= TOL, "{} [{i}]: analytic {an:e} vs numeric {fd:e}", tensor.name);
            checked += 1;
        }
    }
    assert!(checked > 50);
    assert!(worst.is_finite());
}

#[test]
fn composite_objective_gradients() {
    check(TrainMode::Composite, LossConfig::default(), 0.2);
}

#[test]
fn composite_with_heavier_regression_weight() {
    let loss = LossConfig {
        lambda_weight: 3.0,
        beta: 0.25,
        ..LossConfig::default()
    };
    check(TrainMode::Composite, loss, 0.0);
}

#[test]
fn cross_entropy_only_gradients() {
    check(TrainMode::CeOnly, LossConfig::default(), 0.2);
}

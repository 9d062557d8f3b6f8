#![allow(dead_code)]

use clhpo_core::clmethods::{MethodKind, TrainConfig, TrainerState};
use clhpo_core::seed::{self, tag};
use clhpo_core::streamgen::{build_split_stream, synth_gaussian, TaskStream};

/// Gaussian blobs split into `n_tasks` tasks with a 10% validation split.
pub fn blob_stream(
    n_classes: usize,
    n_tasks: usize,
    dim: usize,
    n_per_class: usize,
    seed: u64,
) -> TaskStream {
    let ds = synth_gaussian(n_classes, dim, n_per_class, 4.0, 0).unwrap();
    build_split_stream(&ds, n_tasks, seed)
        .unwrap()
        .with_val_split(0.1, seed)
        .unwrap()
}

pub fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 16,
        buffer_capacity: 64,
        hidden: vec![16],
        ema_decay: 0.999,
    }
}

pub fn trainer(method: MethodKind, stream: &TaskStream, config: TrainConfig, seed: u64) -> TrainerState {
    TrainerState::new(
        method,
        stream.dim,
        stream.n_classes,
        config,
        seed::derive(seed, &[tag::INIT]),
    )
    .unwrap()
}

pub fn param_bits(model: &clhpo_core::MlpModel) -> Vec<u64> {
    model.params().map(|p| p.to_bits()).collect()
}

pub mod gradcheck {
    use clhpo_core::neural::{
        init_mlp, loss_and_grad, mse_logit_loss_and_grad, GradientSet, Matrix, MlpModel,
    };
    use clhpo_core::Example;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const EPS: f64 = 1e-4;

    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Loss {
        CrossEntropy,
        MaskedCrossEntropy,
        MseLogits,
    }

    pub struct Case {
        pub model: MlpModel,
        pub batch: Vec<Example>,
        pub mask: Vec<usize>,
        pub targets: Matrix,
    }

    /// Random architecture, parameters, batch, class mask and logit targets.
    pub fn random_case(seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = rng.gen_range(1..=5);
        let n_hidden = rng.gen_range(0..=2);
        let classes = rng.gen_range(2..=5);
        let mut dims = vec![input];
        dims.extend((0..n_hidden).map(|_| rng.gen_range(2..=6)));
        dims.push(classes);
        let mut model = init_mlp(&dims, seed).unwrap();
        for p in model.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }

        let mut mask: Vec<usize> = (0..classes).filter(|_| rng.gen_bool(0.6)).collect();
        if mask.is_empty() {
            mask.push(rng.gen_range(0..classes));
        }
        let n = rng.gen_range(1..=4);
        let batch: Vec<Example> = (0..n)
            .map(|id| Example {
                id,
                features: (0..input).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                label: mask[rng.gen_range(0..mask.len())],
            })
            .collect();
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        Case {
            model,
            batch,
            mask,
            targets: Matrix::from_rows(&rows).unwrap(),
        }
    }

    pub fn eval(case: &Case, model: &MlpModel, loss: Loss) -> (f64, GradientSet) {
        match loss {
            Loss::CrossEntropy => loss_and_grad(model, &case.batch, None).unwrap(),
            Loss::MaskedCrossEntropy => loss_and_grad(model, &case.batch, Some(&case.mask)).unwrap(),
            Loss::MseLogits => mse_logit_loss_and_grad(model, &case.batch, &case.targets).unwrap(),
        }
    }

    /// Signs of every hidden pre-activation, computed directly from the weights.
    fn relu_pattern(model: &MlpModel, batch: &[Example]) -> Vec<bool> {
        let mut pattern = Vec::new();
        for ex in batch {
            let mut x = ex.features.clone();
            for (l, layer) in model.layers.iter().enumerate() {
                let z: Vec<f64> = (0..layer.outputs)
                    .map(|o| {
                        layer.biases[o]
                            + (0..layer.inputs)
                                .map(|i| layer.weights[o * layer.inputs + i] * x[i])
                                .sum::<f64>()
                    })
                    .collect();
                if l + 1 < model.layers.len() {
                    pattern.extend(z.iter().map(|&v| v > 0.0));
                    x = z.iter().map(|&v| v.max(0.0)).collect();
                }
            }
        }
        pattern
    }

    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    /// Largest relative error between analytic and central-difference
    /// gradients. Coordinates whose perturbation flips a ReLU are skipped,
    /// since the loss is not differentiable across the kink.
    pub fn max_relative_error(case: &Case, loss: Loss) -> (f64, usize) {
        let (_, analytic) = eval(case, &case.model, loss);
        let analytic: Vec<f64> = analytic.values().copied().collect();
        let base_pattern = relu_pattern(&case.model, &case.batch);
        let mut worst = 0.0f64;
        let mut skipped = 0;
        for (k, &g) in analytic.iter().enumerate() {
            let mut plus = case.model.clone();
            let mut minus = case.model.clone();
            *plus.params_mut().nth(k).unwrap() += EPS;
            *minus.params_mut().nth(k).unwrap() -= EPS;
            if relu_pattern(&plus, &case.batch) != base_pattern
                || relu_pattern(&minus, &case.batch) != base_pattern
            {
                skipped += 1;
                continue;
            }
            let numeric = (eval(case, &plus, loss).0 - eval(case, &minus, loss).0) / (2.0 * EPS);
            worst = worst.max(relative_error(g, numeric));
        }
        (worst, skipped)
    }
}

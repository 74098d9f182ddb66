// Scratch instrument for picking test instances. Not part of the build.
use mixem_core::flow::{train_flow_warm, transport, FlowConfig};
use mixem_core::metrics::w1_1d;
use mixem_core::nn::{Activation, DenseNet};
use mixem_core::oracle::{exact_linear_gaussian_posterior, PosteriorSampler};
use mixem_core::{rng, ForwardModel, Prior, Theta};
use nalgebra::{DMatrix, DVector};

fn main() {
    let prior = Prior::standard_normal(1);
    let forward = ForwardModel::identity(1).unwrap();
    let a2 = 1.0;
    let th = Theta::new(a2, 0.0).unwrap();
    let y = [0.8];
    let exact = exact_linear_gaussian_posterior(
        &DMatrix::identity(1, 1),
        &DVector::zeros(1),
        &DMatrix::identity(1, 1),
        a2,
        &y,
    )
    .unwrap();
    let exact_mean = exact.mean()[0];
    let exact_std = exact.covariance()[(0, 0)].sqrt();

    for (hidden, lr, batch, chunk_steps) in [
        (vec![32, 32], 1e-3, 128usize, 1500usize),
        (vec![64, 64], 2e-3, 256, 1500),
        (vec![128, 128, 128], 1e-3, 256, 1500),
    ] {
        let config = FlowConfig {
            training_steps: 0,
            batch_size: batch,
            hidden: hidden.clone(),
            learning_rate: lr,
            ..Default::default()
        };
        let mut rng_train = rng::seeded(13);
        let mut net =
            DenseNet::new(1, 1, &hidden, Activation::Tanh, &mut rng_train).unwrap();
        let mut total = 0;
        for _ in 0..6 {
            let sampler = train_flow_warm(
                net.clone(),
                &prior,
                &forward,
                th,
                &config,
                chunk_steps,
                &mut rng_train,
            )
            .unwrap();
            net = sampler.net.clone();
            total += chunk_steps;
            let samples = transport(&sampler, &y, 5000, &mut rng::seeded(14)).unwrap();
            let n = samples.len() as f64;
            let mean: f64 = samples.iter().map(|s| s[0]).sum::<f64>() / n;
            let std: f64 =
                (samples.iter().map(|s| (s[0] - mean).powi(2)).sum::<f64>() / n).sqrt();
            let flat: Vec<f64> = samples.iter().map(|s| s[0]).collect();
            let mut r2 = rng::seeded(15);
            let exact_draws: Vec<f64> = exact
                .sample(5000, &mut r2)
                .unwrap()
                .iter()
                .map(|s| s[0])
                .collect();
            let w1 = w1_1d(&flat, &exact_draws).unwrap();
            println!(
                "hidden={hidden:?} lr={lr} batch={batch} steps={total}: loss={:.4} mean={:.4} (exact {:.4}) std={:.4} (exact {:.4}) w1={:.4}",
                sampler.final_loss, mean, exact_mean, std, exact_std, w1
            );
        }
    }
}

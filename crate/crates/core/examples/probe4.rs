// Scratch instrument: the 16-dimensional denoising EM run.
use mixem_core::em::{run_em, EBackend, EmConfig};
use mixem_core::model::sample_observation;
use mixem_core::oracle::GridSpec;
use mixem_core::{rng, ForwardModel, ModelBundle, Observation, Prior, Theta, ThetaBox};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(11);
    let eta: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(6e-5);
    let inner: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(150);
    let res: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(601);
    let rounds: usize = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(50);

    let m = 16;
    let bundle = ModelBundle::new(
        ForwardModel::identity(m).unwrap(),
        Prior::standard_normal(m),
        ThetaBox::new(1e-3, 1.0, 1e-4, 1.0).unwrap(),
    )
    .unwrap();
    let th_star = Theta::new(0.01, 0.09).unwrap();
    let mut r = rng::seeded(seed);
    let y_set: Vec<Observation> = (0..1024)
        .map(|_| {
            let x = bundle.prior.sample(&mut r);
            sample_observation(th_star, &bundle.forward, &x, &mut r)
        })
        .collect();
    let config = EmConfig {
        backend: EBackend::Grid(GridSpec::with_resolution(res)),
        observations: y_set,
        eta,
        inner_iters: inner,
        rounds,
        tolerance: 1e-8,
        samples_per_obs: 64,
        flow_warm_steps: None,
    };
    let start = std::time::Instant::now();
    let trace = run_em(&config, &bundle, Theta::new(0.25, 0.25).unwrap(), &mut rng::seeded(1))
        .unwrap();
    println!(
        "seed={seed} eta={eta} inner={inner} res={res}: {:?}, {:.1}s",
        trace.status,
        start.elapsed().as_secs_f64()
    );
    for row in trace.rows.iter() {
        if row.round % 2 == 0 || row.round + 1 == trace.rows.len() {
            println!(
                "  round {:2}: a2={:.5} ({:+.1}%) b2={:.5} ({:+.1}%) loss={:.5} gnorm={:.2e}",
                row.round,
                row.a2,
                100.0 * (row.a2 - 0.01) / 0.01,
                row.b2,
                100.0 * (row.b2 - 0.09) / 0.09,
                row.mstep_loss,
                row.grad_norm
            );
        }
    }
}

// Scratch instrument: EM recovery dynamics on the 1-D grid backend.
use mixem_core::em::{run_em, EBackend, EmConfig};
use mixem_core::model::sample_observation;
use mixem_core::oracle::GridSpec;
use mixem_core::{rng, ForwardModel, ModelBundle, Observation, Prior, Theta, ThetaBox};

fn main() {
    let bundle = ModelBundle::new(
        ForwardModel::identity(1).unwrap(),
        Prior::standard_normal(1),
        ThetaBox::new(1e-3, 2.0, 1e-4, 2.0).unwrap(),
    )
    .unwrap();
    let th_star = Theta::new(0.04, 0.25).unwrap();
    let mut r = rng::seeded(23);
    let y_set: Vec<Observation> = (0..512)
        .map(|_| {
            let x = bundle.prior.sample(&mut r);
            sample_observation(th_star, &bundle.forward, &x, &mut r)
        })
        .collect();
    for (eta, inner, rounds) in [(2e-3, 200, 40), (5e-3, 400, 40), (1e-2, 400, 60)] {
        let config = EmConfig {
            backend: EBackend::Grid(GridSpec::with_resolution(801)),
            observations: y_set.clone(),
            eta,
            inner_iters: inner,
            rounds,
            tolerance: 1e-7,
            samples_per_obs: 64,
            flow_warm_steps: None,
        };
        let trace = run_em(&config, &bundle, Theta::new(0.5, 0.5).unwrap(), &mut rng::seeded(29))
            .unwrap();
        println!("eta={eta} inner={inner} rounds={rounds}: status {:?}", trace.status);
        for row in trace.rows.iter().step_by(5) {
            println!(
                "  round {:2}: theta=({:.5}, {:.5}) loss={:.5} gnorm={:.3e}",
                row.round, row.a2, row.b2, row.mstep_loss, row.grad_norm
            );
        }
        let th = trace.final_theta;
        println!(
            "  final ({:.5}, {:.5}) vs (0.04, 0.25): rel err a2 {:.2}%, b2 {:.2}%",
            th.a2,
            th.b2,
            100.0 * (th.a2 - 0.04_f64).abs() / 0.04,
            100.0 * (th.b2 - 0.25_f64).abs() / 0.25
        );
    }
}

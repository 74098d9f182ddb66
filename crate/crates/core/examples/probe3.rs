// Scratch instrument: asymptotic EM rate = spectral radius of
// I_joint^{-1} (I_joint - I_marginal) per scalar component.
use mixem_core::em::{build_q_objective_marginal_quad, YQuadSpec};
use mixem_core::model::Sym2;
use mixem_core::oracle::GridSpec;
use mixem_core::theory::fisher_information;
use mixem_core::{ForwardModel, ModelBundle, Prior, Theta, ThetaBox};

fn spectral_rate(i_joint: Sym2, v_b: Sym2) -> f64 {
    // Eigenvalues of I_joint^{-1} V_w with V_w = I_joint - V_b (2x2).
    let det = i_joint.det();
    let inv = Sym2 {
        aa: i_joint.bb / det,
        ab: -i_joint.ab / det,
        bb: i_joint.aa / det,
    };
    let vw = i_joint.add(v_b.neg());
    // General (non-symmetric) product.
    let m = [
        [
            inv.aa * vw.aa + inv.ab * vw.ab,
            inv.aa * vw.ab + inv.ab * vw.bb,
        ],
        [
            inv.ab * vw.aa + inv.bb * vw.ab,
            inv.ab * vw.ab + inv.bb * vw.bb,
        ],
    ];
    let tr = m[0][0] + m[1][1];
    let dt = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (tr * tr / 4.0 - dt).max(0.0).sqrt();
    (tr / 2.0 + disc).max(tr / 2.0 - disc)
}

fn main() {
    for (a2, b2) in [
        (0.01_f64, 0.09_f64),
        (0.04, 0.16),
        (0.04, 0.25),
        (0.1, 0.3),
        (0.25, 0.25),
    ] {
        let th = Theta::new(a2, b2).unwrap();
        let bundle = ModelBundle::new(
            ForwardModel::identity(1).unwrap(),
            Prior::standard_normal(1),
            ThetaBox::new(1e-4, 10.0, 0.0, 10.0).unwrap(),
        )
        .unwrap();
        let info = fisher_information(th, &bundle.forward, &bundle.prior, &GridSpec::with_resolution(4001))
            .unwrap();

        // V_b = Var_y(E[score | y]) by marginal y-quadrature.
        let qobj = build_q_objective_marginal_quad(
            &bundle,
            th,
            th,
            &YQuadSpec {
                y_nodes: 1601,
                half_width_stds: 10.0,
                grid: GridSpec::with_resolution(4001),
            },
        )
        .unwrap();
        let grads = qobj.entry_grads(th);
        let weights: Vec<f64> = qobj.entries().iter().map(|e| e.outer_weight).collect();
        let mean = grads.iter().zip(&weights).fold([0.0, 0.0], |acc, (g, w)| {
            [acc[0] + w * g[0], acc[1] + w * g[1]]
        });
        let mut vb = Sym2::ZERO;
        for (g, w) in grads.iter().zip(&weights) {
            let d = [g[0] - mean[0], g[1] - mean[1]];
            vb = vb.add(Sym2 {
                aa: w * d[0] * d[0],
                ab: w * d[0] * d[1],
                bb: w * d[1] * d[1],
            });
        }
        let rate = spectral_rate(info.matrix, vb);
        let rounds_to_240 = (240.0_f64.ln() / -(rate.ln())).ceil();
        println!(
            "theta*=({a2},{b2}): I=[[{:.1},{:.1}],[.,{:.1}]] Vb=[[{:.1},{:.1}],[.,{:.1}]] EM rate={:.4} rounds(x240)={}",
            info.matrix.aa, info.matrix.ab, info.matrix.bb, vb.aa, vb.ab, vb.bb, rate, rounds_to_240
        );
    }
}

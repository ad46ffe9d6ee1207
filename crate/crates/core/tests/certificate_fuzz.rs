use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rscope_core::classify::classify;
use rscope_core::library::ObservedLibrary;
use rscope_core::linalg::CMatrix;
use rscope_core::metrics::{prop1_certificate, BasisSpace, Subspaces};
use rscope_core::Execution;

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMatrix {
    CMatrix::from_fn(rows, cols, |_, _| Complex64::new(rng.sample(StandardNormal), 0.0))
}

fn orthonormal(m: &CMatrix) -> CMatrix {
    m.clone().qr().q()
}

/// Random subspaces, a certified ε and a signal split exactly at the ε
/// limit; half the instances push the out-of-space part towards the most
/// aligned competitor.
#[test]
fn certified_instances_always_classify_correctly() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut checked = 0;
    let mut adversarial = 0;
    while checked < 1000 {
        let m = rng.random_range(8..30);
        let d = rng.random_range(2..5);
        let r = rng.random_range(1..4);
        let raw: Vec<CMatrix> = (0..d).map(|_| gaussian(&mut rng, m, r)).collect();
        let labels: Vec<String> = (0..d).map(|k| format!("W{k}")).collect();
        let sub = Subspaces::new(labels.clone(), &raw, BasisSpace::Observed).unwrap();
        let eta_max = prop1_certificate(&sub, 0.0).unwrap().eta;
        if eta_max >= 0.999 {
            continue;
        }
        let eps = rng.random::<f64>() * (1.0 - eta_max) * (1.0 - 1e-6);
        let cert = prop1_certificate(&sub, eps).unwrap();
        assert!(cert.certified);

        let k = rng.random_range(0..d);
        let q = orthonormal(&raw[k]);
        let inside = &q * gaussian(&mut rng, r, 1);
        let inside_norm = inside.norm();
        let push = if rng.random::<bool>() {
            adversarial += 1;
            let j = (k + 1) % d;
            let qj = orthonormal(&raw[j]);
            &qj * (qj.adjoint() * &inside)
        } else {
            gaussian(&mut rng, m, 1)
        };
        let perp = &push - &q * (q.adjoint() * &push);
        if perp.norm() < 1e-9 {
            continue;
        }
        let y_c = inside + perp.scale(eps * inside_norm / perp.norm());
        let y = DVector::from_iterator(m, y_c.iter().map(|z| z.re));

        let bases = labels.into_iter().zip(raw).collect();
        let obs = ObservedLibrary::from_bases(bases, 0, Execution::Sequential).unwrap();
        let report = classify(&obs, &y).unwrap();
        assert_eq!(report.winner, k, "eta {eta_max} eps {eps} norms {:?}", report.projection_norms);
        checked += 1;
    }
    assert!(adversarial > 300);
}

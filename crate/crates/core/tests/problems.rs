use offo::problems::{apply_noise, default_suite, make_problem, Counted, NoisyOracle, Oracle};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Central differences of the analytic gradient, at random points near the start.
#[test]
fn hessians_match_gradient_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in default_suite() {
        for _ in 0..3 {
            let x: Vec<f64> =
                p.x0.iter()
                    .map(|v| v + rng.random_range(-0.5..0.5))
                    .collect();
            let h = p.hessian(&x).unwrap();
            let scale = h.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            for j in 0..p.n {
                let step = 1e-5 * (1.0 + x[j].abs());
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += step;
                xm[j] -= step;
                let gp = p.gradient(&xp).unwrap();
                let gm = p.gradient(&xm).unwrap();
                for i in 0..p.n {
                    let fd = (gp[i] - gm[i]) / (2.0 * step);
                    assert!(
                        (fd - h[(i, j)]).abs() <= 1e-5 * scale,
                        "{} H[{i},{j}] = {} vs {fd}",
                        p.name,
                        h[(i, j)]
                    );
                }
            }
            assert!(
                (h.clone() - h.transpose()).amax() <= 1e-12 * scale,
                "{} asymmetric",
                p.name
            );
        }
    }
}

#[test]
fn quadratic_lipschitz_constants_are_exact() {
    for name in ["tridia", "booth", "arglina"] {
        let p = make_problem(name, if name == "booth" { 2 } else { 12 }).unwrap();
        let hint = p.lipschitz_hint.unwrap();
        assert!(hint.exact && hint.value > 0.0);
        // the Hessian is constant, so any two points give the same curvature
        let h0 = p.hessian(&p.x0).unwrap();
        let h1 = p.hessian(&vec![3.0; p.n]).unwrap();
        assert!((h0 - h1).amax() == 0.0);
    }
    assert!(!make_problem("rosenbr", 4).unwrap().lipschitz_is_exact());
}

#[test]
fn noisy_oracle_is_reproducible_per_seed() {
    let p = make_problem("rosenbr", 4).unwrap();
    let x = p.x0.clone();
    let draw = |seed| {
        let mut o = NoisyOracle::new(p.clone(), 0.15, seed);
        (0..5).map(|_| o.gradient(&x).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
    let clean = p.gradient(&x).unwrap();
    let mut o = NoisyOracle::new(p.clone(), 0.0, 9);
    assert_eq!(o.gradient(&x).unwrap(), clean);
}

#[test]
fn noise_is_relative() {
    let mut v = vec![0.0, 2.0, -3.0];
    apply_noise(0.5, 1, 0, &mut v);
    assert_eq!(v[0], 0.0);
    assert!(v[1] != 2.0 && v[2] != -3.0);
}

#[test]
fn counting_passes_values_through() {
    let p = make_problem("beale", 2).unwrap();
    let mut c = Counted::new(p.clone());
    assert_eq!(c.value(&p.x0).unwrap(), p.value(&p.x0).unwrap());
    c.gradient(&p.x0).unwrap();
    c.gradient(&p.x0).unwrap();
    assert_eq!(
        (c.counts.values, c.counts.gradients, c.counts.hessians),
        (1, 2, 0)
    );
}

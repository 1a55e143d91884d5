use offo::bench::{
    emit, perf_profile, run_matrix, BenchConfig, BenchReport, Format, ProfileReport, RunRecord,
};
use offo::problems::make_problem;
use offo::solver::Status;

fn small() -> (Vec<String>, Vec<offo::problems::ProblemInstance>) {
    (
        vec!["adagrad".into(), "sdba".into()],
        ["booth", "beale", "tridia"]
            .iter()
            .map(|n| make_problem(n, if *n == "tridia" { 6 } else { 2 }).unwrap())
            .collect(),
    )
}

fn cfg() -> BenchConfig {
    BenchConfig {
        eps: 1e-5,
        max_iter: 20_000,
    }
}

#[test]
fn cardinality_and_determinism() {
    let (m, p) = small();
    let a = run_matrix(&m, &p, &[0.0], &[0], &cfg()).unwrap();
    assert_eq!(a.len(), 6);
    let b = run_matrix(&m, &p, &[0.0], &[0], &cfg()).unwrap();
    assert_eq!(a, b);
    let seeds: Vec<u64> = (0..10).collect();
    let noisy = run_matrix(&m[..1], &p[..1], &[0.15], &seeds, &cfg()).unwrap();
    assert_eq!(noisy.len(), 10);
    for r in a.iter().chain(&noisy) {
        assert_eq!(r.succeeded(), r.final_normg <= cfg().eps);
        assert!(r.iterations <= cfg().max_iter);
        if r.method != "sdba" {
            assert_eq!(r.value_calls, 0);
        }
    }
    assert!(run_matrix(&["bogus".into()], &p, &[0.0], &[0], &cfg()).is_err());
    assert!(run_matrix(&m, &p, &[1.5], &[0], &cfg()).is_err());
}

#[test]
fn rho_at_zero_noise_agrees_across_seed_counts() {
    let (m, p) = small();
    let one = perf_profile(&run_matrix(&m, &p, &[0.0], &[0], &cfg()).unwrap()).unwrap();
    let seeds: Vec<u64> = (0..10).collect();
    let ten = perf_profile(&run_matrix(&m, &p, &[0.0], &seeds, &cfg()).unwrap()).unwrap();
    assert_eq!(one.rho, ten.rho);
    assert_eq!(ten.seeds, 10);
}

fn check_profile(r: &ProfileReport) {
    for (mi, c) in r.curves.iter().enumerate() {
        assert!(c.windows(2).all(|w| w[1] >= w[0]));
        assert!(*c.last().unwrap() <= r.rho[mi] / 100.0 + 1e-12);
        assert!((0.0..=1.0).contains(&r.pi[mi]));
        assert!(r.pi[mi] <= r.rho[mi] / 100.0 + 1e-12);
    }
}

#[test]
fn profiles_are_well_formed() {
    let (m, p) = small();
    let recs = run_matrix(&m, &p, &[0.0, 0.25], &[0, 1, 2], &cfg()).unwrap();
    let report = BenchReport::new(cfg(), recs).unwrap();
    assert_eq!(report.profiles.len(), 2);
    for (_, prof) in &report.profiles {
        check_profile(prof);
    }
}

#[test]
fn never_solved_problems_count_against_everyone() {
    let mk = |method: &str, problem: &str, ok: bool| RunRecord {
        method: method.into(),
        problem: problem.into(),
        n: 1,
        noise: 0.0,
        seed: 0,
        status: if ok {
            Status::Converged
        } else {
            Status::MaxIter
        },
        iterations: 10,
        cost: 10,
        final_normg: 0.0,
        value_calls: 0,
        gradient_calls: 10,
        hessian_calls: 0,
    };
    let recs = vec![
        mk("A", "p", true),
        mk("B", "p", true),
        mk("A", "q", false),
        mk("B", "q", false),
    ];
    let r = perf_profile(&recs).unwrap();
    assert_eq!(r.rho, vec![50.0, 50.0]);
    assert_eq!(r.pi, vec![0.5, 0.5]);
    check_profile(&r);
}

#[test]
fn emission_round_trips() {
    let (m, p) = small();
    let recs = run_matrix(&m, &p, &[0.0], &[0], &cfg()).unwrap();
    let report = BenchReport::new(cfg(), recs).unwrap();
    let dir = std::env::temp_dir().join(format!("offo-bench-{}", std::process::id()));
    emit(&report, &dir, Format::Csv).unwrap();
    emit(&report, &dir, Format::Json).unwrap();
    let agg = std::fs::read_to_string(dir.join("aggregate.csv")).unwrap();
    let mut lines = agg.lines();
    assert_eq!(lines.next(), Some("method,pi,rho"));
    let pis: Vec<f64> = lines
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(pis.len(), 2);
    assert!(pis.windows(2).all(|w| w[0] >= w[1]));
    let records = std::fs::read_to_string(dir.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 7);
    assert!(std::fs::read_to_string(dir.join("profile.csv"))
        .unwrap()
        .starts_with("noise,method,t,rho"));
    let json = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let back: BenchReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, report);
    std::fs::remove_dir_all(&dir).unwrap();
}

use pictor_testkit::suites::autodiff_suite;

#[test]
fn every_op_matches_finite_differences() {
    let cases = autodiff_suite(11);
    let failures: Vec<String> = cases.iter().filter(|c| !c.passed()).map(|c| c.summary()).collect();
    for c in &cases {
        println!("{}", c.summary());
    }
    assert!(failures.is_empty(), "failing checks:\n{}", failures.join("\n"));
}

#[test]
fn suite_is_seed_robust() {
    for seed in [1, 2] {
        for c in autodiff_suite(seed) {
            assert!(c.passed(), "{}", c.summary());
        }
    }
}

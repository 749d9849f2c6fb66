use weight_squeeze::verify::run_checks;

#[test]
fn every_invariant_holds_on_tiny_models() {
    for seed in [0, 7] {
        for check in run_checks(seed).unwrap() {
            println!("{}", check.line());
            assert!(check.passed(), "seed {seed}: {}", check.line());
        }
    }
}

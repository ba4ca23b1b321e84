use riskirl_harness::stopping::{check_stopping, toy_domains};

#[test]
fn normalized_stopping_rule_terminates_with_small_true_loss() {
    let epsilon = 0.05;
    for domain in toy_domains().unwrap() {
        for seed in 0..10 {
            let out = check_stopping(&domain, epsilon, 40, seed).unwrap();
            println!("{out:?}");
            assert!(out.stopped, "{out:?}");
            assert!(out.final_max_var < epsilon, "{out:?}");
            assert!(out.worst_true_normalized_evd < 1.5 * epsilon, "{out:?}");
        }
    }
}

mod common;

use common::gradient_errors;

#[test]
fn joint_loss_and_target_logit_match_central_differences() {
    let mut worst = common::GradErrors::default();
    for seed in 0..100 {
        let e = gradient_errors(seed);
        assert!(e.loss <= 1e-4, "seed {seed}: loss gradient error {}", e.loss);
        assert!(e.target_params <= 1e-4, "seed {seed}: target parameter gradient error {}", e.target_params);
        assert!(e.target_maps <= 1e-4, "seed {seed}: attention map gradient error {}", e.target_maps);
        worst.loss = worst.loss.max(e.loss);
        worst.target_params = worst.target_params.max(e.target_params);
        worst.target_maps = worst.target_maps.max(e.target_maps);
    }
    eprintln!("worst relative errors: {worst:?}");
}

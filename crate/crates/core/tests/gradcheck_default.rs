use std::time::Instant;

use noisenet_core::nn::gradcheck::{check_all, GradcheckOptions};
use noisenet_core::nn::NetworkConfig;

#[test]
fn default_network_gradients_match_finite_differences() {
    let start = Instant::now();
    let report = check_all(&NetworkConfig::default(), &GradcheckOptions::default()).unwrap();
    for l in &report.layers {
        println!(
            "{:<40} checked {:>4} skipped {:>3} max {:.3e}",
            l.layer, l.checked, l.skipped, l.max_rel_error
        );
    }
    assert!(report.passed(), "{:#?}", report.failures().collect::<Vec<_>>());
    assert!(start.elapsed().as_secs() < 120);
}

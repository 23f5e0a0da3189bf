use ggvit_core::check::{check_loss_term, failure_lines, summary_line, term_passed, CheckSettings, LossTerm};
use ggvit_core::model::ModelConfig;

// The individual terms are covered by the acceptance suite; the total exercises every path.
#[test]
fn total_loss_matches_finite_differences() {
    let report = check_loss_term(&ModelConfig::tiny(), LossTerm::Total, &CheckSettings::default()).unwrap();
    println!("{}", summary_line(LossTerm::Total, &report));
    for line in failure_lines(&report) {
        println!("{line}");
    }
    assert!(term_passed(&report));
}

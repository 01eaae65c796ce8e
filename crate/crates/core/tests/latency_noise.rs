//! Timing noise band. Kept in its own test binary so nothing else competes
//! for the CPU while it runs.

use tokbias::biaser::BiasConfig;
use tokbias::decode::SyntheticLM;
use tokbias::eval::{measure_latency, LatencyOptions};
use tokbias::knowledge::EntitySet;

#[test]
fn identical_control_arms_stay_in_noise_band() {
    let lm = SyntheticLM::new(8000, 5, &["richard", "dawkins", "stephen", "king"]);
    let e = EntitySet::from_words(["richard", "dawkins"], ["stephen", "king"]).unwrap();
    let control = BiasConfig::default().control();
    let r = measure_latency(&lm, "Question: Who wrote Misery?\nAnswer:", &e, &control, &LatencyOptions::default()).unwrap();
    assert!(
        (0.9..=1.1).contains(&r.overhead_ratio),
        "ratio {} for identical work",
        r.overhead_ratio
    );
    assert_eq!(r.max_sim_evaluations_per_step, 0);
}

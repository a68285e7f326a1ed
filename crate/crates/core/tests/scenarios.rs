use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use proptest::prelude::*;
use safebt_core::bt::{parse_tree, TreeNode};
use safebt_core::safety::BarrierLibrary;
use safebt_core::sim::{run_scenario, SafetyConfig, Scenario, ScenarioTrace};

fn fixture(rel: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(rel);
    fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn scenario(name: &str) -> Scenario {
    Scenario::from_json(&fixture(&format!("scenarios/{name}.json"))).unwrap()
}

fn tree(name: &str) -> TreeNode {
    parse_tree(&fixture(&format!("trees/{name}.json"))).unwrap()
}

fn speed_capped() -> SafetyConfig {
    serde_json::from_str(&fixture("safety/speed_capped.json")).unwrap()
}

fn run(s: &Scenario, t: &TreeNode, safety: &SafetyConfig) -> ScenarioTrace {
    run_scenario(s, t, safety, &BarrierLibrary::with_builtins()).unwrap()
}

fn jsonl(trace: &ScenarioTrace) -> Vec<u8> {
    let mut out = Vec::new();
    trace.write_jsonl(&mut out).unwrap();
    out
}

fn min_h(trace: &ScenarioTrace, label: &str) -> f64 {
    trace.records.iter().map(|r| r.h[label].unwrap()).fold(f64::INFINITY, f64::min)
}

#[test]
fn filtered_crossing_keeps_its_distance() {
    let trace = run(&scenario("crossing"), &tree("guarded_errand"), &speed_capped());
    assert!(min_h(&trace, "human_guard") >= -1e-3, "{}", min_h(&trace, "human_guard"));
    assert!(trace.records.iter().all(|r| r.faults.is_empty()));
}

#[test]
fn unfiltered_chase_breaks_the_barrier() {
    let mut safety = speed_capped();
    safety.filter_enabled = false;
    let trace = run(&scenario("collision_course"), &tree("chase"), &safety);
    assert!(min_h(&trace, "human_guard") < 0.0);

    safety.filter_enabled = true;
    let trace = run(&scenario("collision_course"), &tree("chase"), &safety);
    assert!(min_h(&trace, "human_guard") >= -1e-3, "{}", min_h(&trace, "human_guard"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn traces_are_complete_and_reproducible(
        seed in any::<u64>(),
        rate in 10.0..60.0f64,
        duration in 0.5..3.0f64,
        noise in prop_oneof![Just(0.0), 0.0..0.05f64],
        filtered in any::<bool>(),
    ) {
        let mut s = scenario("crossing");
        s.seed = seed;
        s.rate = rate;
        s.duration = duration;
        s.sensor_noise = noise;
        let mut safety = speed_capped();
        safety.filter_enabled = filtered;
        let t = tree("guarded_errand");

        let trace = run(&s, &t, &safety);
        prop_assert_eq!(trace.records.len() as f64, (rate * duration).round());
        let configured: BTreeSet<&str> = ["human_guard", "speed_cap", "battery_ok", "human_far"].into();
        for (i, r) in trace.records.iter().enumerate() {
            prop_assert_eq!(r.tick as usize, trace.records[0].tick as usize + i);
            let keys: BTreeSet<&str> = r.h.keys().map(String::as_str).collect();
            prop_assert!(keys.is_superset(&configured), "tick {}: {:?}", r.tick, keys);
            prop_assert!(r.h["human_guard"].is_some() && r.h["battery_ok"].is_some());
            prop_assert!(r.faults.is_empty(), "tick {}: {:?}", r.tick, r.faults);
        }
        prop_assert_eq!(jsonl(&trace), jsonl(&run(&s, &t, &safety)));
    }
}

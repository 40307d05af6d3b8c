//! Full pinned acceptance run. Executes the complete experiment twice and
//! prints one pass/fail line per criterion.

use critic_lab::pipeline::{repro, CriterionResult, ExperimentConfig};

const REPORT_FILES: [&str; 7] = [
    "report.json",
    "criteria.txt",
    "ablate_noise.csv",
    "ablate_negdensity.csv",
    "ablate_datascale.csv",
    "infonce.model.json",
    "bce.model.json",
];

#[test]
fn acceptance() {
    let cfg = ExperimentConfig::default();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();

    let outcome = repro(&cfg, dir_a.path()).unwrap();
    let again = repro(&cfg, dir_b.path()).unwrap();

    let mut criteria = outcome.criteria.clone();

    let mut identical = true;
    let mut mismatched = Vec::new();
    for name in REPORT_FILES {
        let a = std::fs::read(dir_a.path().join(name)).unwrap();
        let b = std::fs::read(dir_b.path().join(name)).unwrap();
        if a != b {
            identical = false;
            mismatched.push(name);
        }
    }
    criteria.push(CriterionResult {
        id: 11,
        name: "byte-identical reproduction".to_string(),
        passed: identical,
        detail: if identical {
            format!("{} report files byte-equal across two runs", REPORT_FILES.len())
        } else {
            format!("files differ: {}", mismatched.join(", "))
        },
    });

    assert_eq!(outcome.criteria.len(), again.criteria.len());

    let mut failures = 0usize;
    for c in &criteria {
        println!("{}", c.line());
        if !c.passed {
            failures += 1;
        }
    }
    assert_eq!(failures, 0, "{failures} acceptance criteria failed");
}

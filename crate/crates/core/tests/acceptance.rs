//! Acceptance gate: runs every criterion and prints one line per result.
//! The suite is also reachable through the CLI's validate subcommand.
//! Set COLLAPSELAB_CRITERIA to a comma-separated id list (e.g. "8,10") to
//! rerun a subset while debugging; the default runs everything.

use collapselab::acceptance::{run_all, run_ids};

#[test]
fn acceptance_suite() {
    let results = match std::env::var("COLLAPSELAB_CRITERIA") {
        Ok(list) => {
            let ids: Vec<usize> = list
                .split(',')
                .filter_map(|s| s.trim().parse().ok())
                .collect();
            run_ids(&ids)
        }
        Err(_) => run_all(),
    };
    assert!(!results.is_empty(), "no criteria selected");
    let mut all = true;
    for r in &results {
        println!("{}", r.line());
        all &= r.passed;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{:02} {}", r.id, r.name))
        .collect();
    assert!(all, "criteria failed: {}", failed.join(", "));
}

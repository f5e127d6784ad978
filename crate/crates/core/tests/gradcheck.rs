mod common;

use std::collections::BTreeMap;

use common::gradcheck::{cases, max_rel_error, INSTANCES};

#[test]
fn every_operator_matches_finite_differences() {
    let mut worst: BTreeMap<&str, (f64, u64)> = BTreeMap::new();
    for k in 0..INSTANCES {
        for case in cases(k) {
            let e = max_rel_error(&case);
            let entry = worst.entry(case.op).or_default();
            entry.1 += 1;
            if e > entry.0 {
                entry.0 = e;
            }
        }
    }
    for (op, (e, n)) in &worst {
        eprintln!("{op:<20} {n} instances, max rel err {e:.2e}");
        assert!(*n >= 5, "{op}: {n} instances");
        assert!(*e < 1e-3, "{op}: max relative error {e:.3e}");
    }
    assert_eq!(worst.len(), 17);
}

//! Fast paths against brute-force references, and exact identities.

mod support;

#[test]
fn fast_paths_match_oracles() {
    for r in support::oracle_suite(12) {
        println!("{:<18} max err {:.2e} (tol {:.0e})", r.name, r.max_error, r.tolerance);
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn identities_are_exact() {
    for (name, ok) in support::identity_checks() {
        assert!(ok, "{name}");
    }
}

//! Every config shipped under configs/ must stay loadable.

use std::path::PathBuf;

use evcl::harness::load_config;

#[test]
fn shipped_configs_parse() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = load_config(&path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
            assert!(!cfg.methods.is_empty());
            n += 1;
        }
    }
    assert!(n >= 7, "expected the shipped experiment set, found {n}");
}

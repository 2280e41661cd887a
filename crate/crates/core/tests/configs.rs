use std::path::PathBuf;

use ppa_dagger::harness::RunConfig;

fn shipped(name: &str) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name);
    RunConfig::load(&path).unwrap()
}

#[test]
fn shipped_profiles_match_builtins() {
    assert_eq!(shipped("desk.toml"), RunConfig::desk());
    assert_eq!(shipped("full_scale.toml"), RunConfig::full_scale());
}

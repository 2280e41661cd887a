//! Prints a built-in profile as TOML (`desk` or `full`).

fn main() {
    let c = match std::env::args().nth(1).as_deref() {
        Some("full") => ppa_dagger::harness::RunConfig::full_scale(),
        _ => ppa_dagger::harness::RunConfig::desk(),
    };
    print!("{}", c.to_toml());
}

use std::process::Command;

fn main() {
    // Embed a git-describe style version for experiment provenance; fall back
    // to the crate version when building outside a git checkout.
    let desc = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    let version = match desc {
        Some(d) if !d.is_empty() => format!("{}-{}", env!("CARGO_PKG_VERSION"), d),
        _ => env!("CARGO_PKG_VERSION").to_string(),
    };
    println!("cargo:rustc-env=LUTMM_BUILD_VERSION={version}");
    println!("cargo:rerun-if-changed=build.rs");
}

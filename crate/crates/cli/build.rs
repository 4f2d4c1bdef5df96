use std::process::Command;

fn main() {
    let out = Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output();
    if let Ok(out) = out {
        if out.status.success() {
            let id = String::from_utf8_lossy(&out.stdout).trim().to_string();
            if !id.is_empty() {
                println!("cargo:rustc-env=LIGHTCRL_GIT_DESCRIBE={id}");
            }
        }
    }
    println!("cargo:rerun-if-changed=build.rs");
}

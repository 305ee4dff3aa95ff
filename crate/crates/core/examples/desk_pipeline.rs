//! The whole workflow through the command-line front end: phantoms,
//! flow training, encoding, temporal training and forecast evaluation.
//! Equivalent to running the `voxflow` binary with the same arguments.
//!
//! cargo run --release --example desk_pipeline [work_dir]

use std::path::PathBuf;

fn voxflow(args: &[&str]) -> voxflow::Result<()> {
    println!("$ voxflow {}", args.join(" "));
    voxflow::cli::run_from(std::iter::once("voxflow").chain(args.iter().copied()))
}

fn main() -> voxflow::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("voxflow-desk"));
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let (data, spatial, latents, temporal, eval) = (p("data"), p("spatial"), p("latents"), p("temporal"), p("eval"));
    let flow = format!("{spatial}/flow.vflw");
    let tp = format!("{temporal}/temporal.vftp");

    voxflow(&["phantom-gen", "--subjects", "58", "--years", "6", "--test-subjects", "8", "--seed", "1", "--out", &data])?;
    voxflow(&["train-spatial", "--data", &data, "--out", &spatial, "--limit", "64", "--seed", "1"])?;
    voxflow(&["encode", "--data", &data, "--flow", &flow, "--out", &latents])?;
    voxflow(&["train-temporal", "--latents", &latents, "--out", &temporal, "--final-activation", "linear", "--seed", "1"])?;
    voxflow(&["evaluate", "--data", &data, "--flow", &flow, "--temporal", &tp, "--steps", "3", "--out", &eval])?;

    println!("\n{}", std::fs::read_to_string(dir.join("eval/mae.csv"))?);
    println!("{}", std::fs::read_to_string(dir.join("eval/mae_frozen.csv"))?);
    Ok(())
}

//! Runs the desk experiment and prints the directional measurements.
//!
//! `cargo run --release -p facectl-core --example desk_run [work_dir]`

use facectl_core::pipeline::{default_work_dir, measure_desk, run_desk_pipeline, DeskConfig, PipelineLog};

struct Stderr;
impl PipelineLog for Stderr {
    fn line(&mut self, stage: &str, text: &str) {
        eprintln!("[{stage}] {text}");
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(Into::into).unwrap_or_else(default_work_dir);
    let cfg = DeskConfig::default();
    let art = run_desk_pipeline(&cfg, &dir, &mut Stderr)?;
    let res = measure_desk(&cfg, &art, &mut Stderr)?;
    println!("{}", serde_json::to_string_pretty(&res)?);
    Ok(())
}

use clap::Parser;
use facectl_cli::commands::{run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let summary = run(cli)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

//! Parses a run config, shows the resolved values and how errors are reported.

use dabfnet::config::RunConfig;

fn main() -> dabfnet::error::Result<()> {
    let text = "# baseline detector\nhead = plain\nneck = fpn\nloss = ciou\nepochs = 30\n";
    let cfg = RunConfig::parse(text)?;
    println!("{}", cfg.to_text());
    for bad in ["epochs = 30\nepochs = 40\n", "lr = fast\n", "nekc = fpn\n"] {
        println!("{:?} -> {}", bad, RunConfig::parse(bad).unwrap_err());
    }
    Ok(())
}

mod config;

use anyhow::Result;
use clap::Parser;
use log::{info, warn};
use negotiate_core::run::{self, RunSummary};

use crate::config::{parse_config, Cli};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (config, conflicts) = parse_config(&cli)?;
    for c in &conflicts {
        warn!("{c}");
    }
    if cli.dry_run {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(());
    }
    let (out, summary) = run::execute(&config)?;
    match &summary {
        RunSummary::Paired { table_row, .. } | RunSummary::Community { table_row, .. } => println!("{table_row}"),
        RunSummary::Analysis(a) => {
            println!("games {}, agreements {}", a.games, a.agreements);
            if let Some(s) = a.top_unigram_share {
                println!("top unigram share {s:.3}");
            }
            if let Some(p) = &a.probe {
                println!(
                    "probe accuracy: util_a {:.3}, util_b {:.3}, proposal {:.3} (zero input: {:.3}, {:.3}, {:.3})",
                    p.probe.utilities_a(),
                    p.probe.utilities_b(),
                    p.probe.proposal(),
                    p.zero_input.utilities_a(),
                    p.zero_input.utilities_b(),
                    p.zero_input.proposal()
                );
            }
            if let Some(purity) = a.embedding_purity {
                println!("2-means purity of opponent embeddings {purity:.2}");
            }
        }
    }
    info!("artifacts in {}", out.display());
    Ok(())
}

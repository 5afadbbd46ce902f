//! Merges command-line flags over an optional JSON config file over the
//! built-in defaults.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Parser;
use negotiate_core::env::{Channel, Role, Sociality};
use negotiate_core::run::{Experiment, RunConfig};
use serde_json::{Map, Value};

#[derive(Debug, Default, Parser)]
#[command(name = "negotiate", version, about = "Train and analyze negotiating agents")]
pub struct Cli {
    /// JSON file with any subset of the run configuration keys.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, value_parser = parse_with::<Experiment>)]
    pub experiment: Option<Experiment>,

    /// proposal, linguistic, both or none.
    #[arg(long, value_parser = parse_with::<Channel>)]
    pub channel: Option<Channel>,

    /// Reward schemes of A and B, e.g. `prosocial,prosocial`; one value
    /// applies to both.
    #[arg(long, value_parser = parse_sociality)]
    pub sociality: Option<SocialityPair>,

    #[arg(long)]
    pub episodes: Option<u64>,

    /// Games per episode.
    #[arg(long)]
    pub batch: Option<usize>,

    /// Comma-separated seeds or an inclusive range such as `1-5`.
    #[arg(long, value_parser = parse_seeds)]
    pub seeds: Option<SeedList>,

    #[arg(long)]
    pub n_prosocial: Option<usize>,

    #[arg(long, value_parser = parse_with::<Role>)]
    pub fixed_role: Option<Role>,

    #[arg(long, value_parser = parse_with::<Sociality>)]
    pub fixed_sociality: Option<Sociality>,

    /// Give the fixed community agent an embedding of its opponent's ID.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub ids: Option<bool>,

    #[arg(long)]
    pub hidden_dim: Option<usize>,

    #[arg(long)]
    pub eval_interval: Option<u64>,

    /// Transcript file or run directory to analyze; repeatable.
    #[arg(long = "input", value_name = "PATH")]
    pub inputs: Vec<PathBuf>,

    /// Checkpoint whose opponent-ID table is projected during analysis.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Output directory; defaults to a named directory under $NEGOTIATE_OUT
    /// or ./runs.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Train seeds one at a time.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,

    /// Print the merged configuration and exit.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SocialityPair(pub [Sociality; 2]);

#[derive(Clone, Debug, PartialEq)]
pub struct SeedList(pub Vec<u64>);

fn parse_with<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn parse_sociality(s: &str) -> std::result::Result<SocialityPair, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let parse = |p: &str| p.parse::<Sociality>().map_err(|e| e.to_string());
    match parts.as_slice() {
        [one] => Ok(SocialityPair([parse(one)?; 2])),
        [a, b] => Ok(SocialityPair([parse(a)?, parse(b)?])),
        _ => Err(format!("expected one or two comma-separated values, got {s:?}")),
    }
}

fn parse_seeds(s: &str) -> std::result::Result<SeedList, String> {
    if let Some((lo, hi)) = s.split_once('-') {
        let lo: u64 = lo.trim().parse().map_err(|_| format!("bad seed range {s:?}"))?;
        let hi: u64 = hi.trim().parse().map_err(|_| format!("bad seed range {s:?}"))?;
        if hi < lo {
            return Err(format!("empty seed range {s:?}"));
        }
        return Ok(SeedList((lo..=hi).collect()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|_| format!("bad seed {p:?}")))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map(SeedList)
}

/// The merged configuration plus one message per key where a flag replaced
/// a different value from the file.
pub fn parse_config(cli: &Cli) -> Result<(RunConfig, Vec<String>)> {
    let mut merged = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            match value {
                Value::Object(map) => map,
                _ => bail!("{}: expected a JSON object", path.display()),
            }
        }
        None => Map::new(),
    };
    let from_file = merged.clone();

    let mut flags: Vec<(&str, Value)> = Vec::new();
    let mut set = |key: &'static str, v: Option<Value>| {
        if let Some(v) = v {
            flags.push((key, v));
        }
    };
    set("experiment", cli.experiment.map(json));
    set("channel", cli.channel.map(json));
    set("sociality", cli.sociality.map(|s| json(s.0)));
    set("episodes", cli.episodes.map(json));
    set("batch_size", cli.batch.map(json));
    set("seeds", cli.seeds.as_ref().map(|s| json(&s.0)));
    set("n_prosocial", cli.n_prosocial.map(json));
    set("fixed_role", cli.fixed_role.map(json));
    set("fixed_sociality", cli.fixed_sociality.map(json));
    set("ids", cli.ids.map(json));
    set("hidden_dim", cli.hidden_dim.map(json));
    set("eval_interval", cli.eval_interval.map(json));
    set("inputs", (!cli.inputs.is_empty()).then(|| json(&cli.inputs)));
    set("checkpoint", cli.checkpoint.as_ref().map(json));
    set("out", cli.out.as_ref().map(json));
    set("deterministic", cli.deterministic.map(json));

    let mut conflicts = Vec::new();
    for (key, value) in flags {
        if let Some(old) = from_file.get(key) {
            if *old != value {
                conflicts.push(format!("--{} overrides {key} = {old} from the config file with {value}", flag_name(key)));
            }
        }
        merged.insert(key.to_string(), value);
    }
    // one hidden size for every layer unless the file sets them apart
    if let Some(h) = cli.hidden_dim {
        for key in ["embed_dim", "id_embed_dim"] {
            if !from_file.contains_key(key) {
                merged.insert(key.to_string(), Value::from(h));
            }
        }
    }

    let config: RunConfig = serde_json::from_value(Value::Object(merged)).context("invalid configuration")?;
    config.validate().context("invalid configuration")?;
    Ok((config, conflicts))
}

fn json<T: serde::Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("plain data")
}

fn flag_name(key: &str) -> String {
    match key {
        "batch_size" => "batch".to_string(),
        "inputs" => "input".to_string(),
        k => k.replace('_', "-"),
    }
}

//! Run configuration and artifact-producing orchestration.
//!
//! A training run writes, under its output directory:
//!
//! ```text
//! config.json               the configuration, verbatim
//! summary.json              across-seed table cell
//! table.csv                 the same cell as one CSV row
//! seed_<n>/metrics.csv
//! seed_<n>/transcripts.jsonl greedy games after training
//! seed_<n>/checkpoints/episode_<e>.json
//! seed_<n>/summary.json
//! ```
//!
//! An analysis run writes symbol tables, probe accuracies, rank
//! correlations and, given a checkpoint with an opponent-ID table, the
//! projected embeddings.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentConfig, AgentParams};
use crate::analysis::{self, ProbeConfig, ProbeDataset, ProbeSuite};
use crate::diffcore::{AdamConfig, Checkpoint};
use crate::env::{Channel, Horizon, Role, Sociality, MAX_TURN_LIMIT};
use crate::error::{Error, Result};
use crate::experiments::{
    run_community_seed, run_paired_seed, CommunityConfig, CommunitySeedResult, CommunitySummary, PairedSeedResult, PairedSummary,
};
use crate::trainer::{EntropyWeights, MetricsRow, Progress, TrainConfig, BASELINE_SMOOTHING};
use crate::transcript::{self, TranscriptRecord};

/// Root for run directories when no output directory is given.
pub const OUT_ENV: &str = "NEGOTIATE_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Paired,
    PairedFixedHorizon,
    Community,
    Analyze,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Paired => "paired",
            Experiment::PairedFixedHorizon => "paired_fixed_horizon",
            Experiment::Community => "community",
            Experiment::Analyze => "analyze",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Experiment::Paired, Experiment::PairedFixedHorizon, Experiment::Community, Experiment::Analyze]
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// Everything a run needs. Unknown keys in a config file are rejected and
/// missing ones take these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub channel: Channel,
    /// Reward schemes of agents A and B in paired runs.
    pub sociality: [Sociality; 2],
    pub episodes: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    pub eval_batches: usize,
    pub seeds: Vec<u64>,
    pub checkpoint_interval: u64,

    pub community_size: usize,
    pub n_prosocial: usize,
    pub fixed_role: Role,
    pub fixed_sociality: Sociality,
    pub ids: bool,
    pub test_batches: usize,
    pub test_batch_size: usize,

    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub id_embed_dim: usize,
    pub allow_dummy_symbol: bool,
    pub variable_length: bool,
    pub entropy: EntropyWeights,
    pub baseline_smoothing: f64,
    pub adam: AdamConfig,

    /// Analysis inputs: transcript files or run directories.
    pub inputs: Vec<PathBuf>,
    /// Checkpoint holding a `fixed/opponent_ids/table` tensor.
    pub checkpoint: Option<PathBuf>,
    pub probe: ProbeConfig,
    /// Feed the accepting turn's never-transmitted message to the probe.
    pub probe_final_message: bool,

    pub out: Option<PathBuf>,
    /// Train seeds one after another instead of in parallel.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            experiment: Experiment::Paired,
            channel: Channel::Proposal,
            sociality: [Sociality::Selfish; 2],
            episodes: 20_000,
            batch_size: 128,
            eval_interval: 50,
            eval_batches: 5,
            seeds: vec![1, 2, 3, 4, 5],
            checkpoint_interval: 5_000,
            community_size: 10,
            n_prosocial: 5,
            fixed_role: Role::A,
            fixed_sociality: Sociality::Selfish,
            ids: false,
            test_batches: 10,
            test_batch_size: 128,
            embed_dim: 100,
            hidden_dim: 100,
            id_embed_dim: 100,
            allow_dummy_symbol: true,
            variable_length: false,
            entropy: EntropyWeights::default(),
            baseline_smoothing: BASELINE_SMOOTHING,
            adam: AdamConfig::default(),
            inputs: Vec::new(),
            checkpoint: None,
            probe: ProbeConfig::default(),
            probe_final_message: false,
            out: None,
            deterministic: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        if self.experiment == Experiment::Analyze {
            if self.inputs.is_empty() {
                return bad("inputs", "analyze needs at least one transcript file or run directory");
            }
            return Ok(());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return bad("seeds", "seeds must be distinct");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.eval_interval == 0 {
            return bad("eval_interval", "must be positive");
        }
        if self.eval_batches == 0 {
            return bad("eval_batches", "must be positive");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.id_embed_dim == 0 {
            return bad("hidden_dim", "dimensions must be positive");
        }
        if !(0.0..1.0).contains(&self.baseline_smoothing) {
            return bad("baseline_smoothing", "must lie in [0, 1)");
        }
        if [self.entropy.term, self.entropy.utt, self.entropy.prop].iter().any(|w| *w < 0.0) {
            return bad("entropy", "weights must be nonnegative");
        }
        if self.experiment == Experiment::Community {
            self.community_config(self.seeds[0]).validate()?;
            if self.test_batches == 0 || self.test_batch_size == 0 {
                return bad("test_batches", "community testing needs at least one game");
            }
        }
        Ok(())
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            id_embed_dim: self.id_embed_dim,
            n_opponents: None,
            allow_dummy_symbol: self.allow_dummy_symbol,
            variable_length: self.variable_length,
        }
    }

    pub fn horizon(&self) -> Horizon {
        match self.experiment {
            Experiment::PairedFixedHorizon => Horizon::Fixed(MAX_TURN_LIMIT),
            _ => Horizon::TruncatedPoisson,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            agent: self.agent_config(),
            channel: self.channel,
            horizon: self.horizon(),
            sociality: self.sociality,
            batch_size: self.batch_size,
            episodes: self.episodes,
            eval_interval: self.eval_interval,
            eval_batches: self.eval_batches,
            entropy: self.entropy,
            baseline_smoothing: self.baseline_smoothing,
            adam: self.adam,
            seed,
        }
    }

    pub fn community_config(&self, seed: u64) -> CommunityConfig {
        CommunityConfig {
            agent: self.agent_config(),
            channel: self.channel,
            horizon: self.horizon(),
            community_size: self.community_size,
            n_prosocial: self.n_prosocial,
            fixed_role: self.fixed_role,
            fixed_sociality: self.fixed_sociality,
            ids: self.ids,
            batch_size: self.batch_size,
            episodes: self.episodes,
            eval_interval: self.eval_interval,
            eval_batches: self.eval_batches,
            test_batches: self.test_batches,
            test_batch_size: self.test_batch_size,
            entropy: self.entropy,
            baseline_smoothing: self.baseline_smoothing,
            adam: self.adam,
            seed,
        }
    }

    /// Directory name used under the output root when `out` is unset.
    pub fn run_name(&self) -> String {
        match self.experiment {
            Experiment::Analyze => "analysis".to_string(),
            Experiment::Community => format!(
                "community_{}_{}_{}pro_{}_{}",
                self.fixed_sociality.name(),
                self.fixed_role,
                self.n_prosocial,
                if self.ids { "ids" } else { "noids" },
                self.channel
            ),
            e => format!(
                "{}_{}_{}_{}",
                e.name(),
                self.sociality[0].name(),
                self.sociality[1].name(),
                self.channel
            ),
        }
    }

    /// `out` if set, otherwise `$NEGOTIATE_OUT/<run name>` or `runs/<run name>`.
    pub fn output_dir(&self) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT), PathBuf::from);
                root.join(self.run_name())
            }
        }
    }
}

/// What `summary.json` holds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunSummary {
    Paired { table_row: String, summary: PairedSummary },
    Community { table_row: String, summary: CommunitySummary },
    Analysis(Box<AnalysisSummary>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub games: usize,
    pub agreements: usize,
    pub top_unigram_share: Option<f64>,
    pub top_unigram_share_a: Option<f64>,
    pub top_unigram_share_b: Option<f64>,
    pub probe: Option<ProbeSuite>,
    /// Why the probe did not run.
    pub probe_skipped: Option<String>,
    /// Pairwise rank correlation between inputs, `None` where undefined.
    pub bigram_spearman: Vec<Vec<Option<f64>>>,
    pub embedding_purity: Option<f64>,
}

/// Runs the configured experiment and writes its artifacts.
pub fn execute(config: &RunConfig) -> Result<(PathBuf, RunSummary)> {
    config.validate()?;
    let out = config.output_dir();
    fs::create_dir_all(&out)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    info!("{} run writing to {}", config.experiment.name(), out.display());
    let summary = match config.experiment {
        Experiment::Paired | Experiment::PairedFixedHorizon => run_paired_dir(config, &out)?,
        Experiment::Community => run_community_dir(config, &out)?,
        Experiment::Analyze => RunSummary::Analysis(Box::new(analyze_dir(config, &out)?)),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok((out, summary))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    analysis::symbols::write_rows(BufWriter::new(fs::File::create(path)?), rows)
}

fn for_each_seed<R: Send>(config: &RunConfig, f: impl Fn(u64) -> Result<R> + Sync) -> Result<Vec<R>> {
    if config.deterministic {
        config.seeds.iter().map(|&s| f(s)).collect()
    } else {
        config.seeds.par_iter().map(|&s| f(s)).collect()
    }
}

/// Writes a checkpoint per snapshot that falls on the interval.
fn checkpoint_writer<'a>(dir: &'a Path, interval: u64, last: u64, failure: &'a mut Option<Error>) -> impl FnMut(Progress<'_, f32>) + 'a {
    move |p| {
        if let Progress::Snapshot { episode, agents } = p {
            let due = episode == last || (interval > 0 && episode % interval == 0);
            if !due || failure.is_some() {
                return;
            }
            let mut ck = Checkpoint::new::<f32>();
            ck.metadata.insert("episode".into(), episode.into());
            let result = agents
                .iter()
                .try_for_each(|(name, params)| {
                    ck.metadata.insert(format!("{name}/config"), serde_json::to_value(params.config).expect("plain data"));
                    ck.insert(name, *params)
                })
                .and_then(|_| ck.save(&dir.join(format!("episode_{episode}.json"))));
            if let Err(e) = result {
                *failure = Some(e);
            }
        }
    }
}

fn seed_dir(out: &Path, seed: u64) -> Result<PathBuf> {
    let dir = out.join(format!("seed_{seed}"));
    fs::create_dir_all(dir.join("checkpoints"))?;
    Ok(dir)
}

fn run_paired_dir(config: &RunConfig, out: &Path) -> Result<RunSummary> {
    let results: Vec<PairedSeedResult> = for_each_seed(config, |seed| {
        let dir = seed_dir(out, seed)?;
        let tc = config.train_config(seed);
        let mut failure = None;
        let run = run_paired_seed::<f32>(
            &tc,
            checkpoint_writer(&dir.join("checkpoints"), config.checkpoint_interval, config.episodes, &mut failure),
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if config.episodes == 0 {
            let mut ck = Checkpoint::new::<f32>();
            ck.metadata.insert("episode".into(), 0.into());
            ck.insert("agent_a", &run.learners[0].params)?;
            ck.insert("agent_b", &run.learners[1].params)?;
            ck.save(&dir.join("checkpoints").join("episode_0.json"))?;
        }
        write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
        let records: Vec<TranscriptRecord> = run.final_eval.iter().map(|t| TranscriptRecord::from_trajectory(seed, t)).collect();
        transcript::write_jsonl(&dir.join("transcripts.jsonl"), &records)?;
        write_json(&dir.join("summary.json"), &run.result)?;
        info!(
            "seed {seed}: joint {:.3}, turns {:.2}, agreement {:.3}",
            run.result.joint_optimality, run.result.mean_turns, run.result.agreement_rate
        );
        Ok(run.result)
    })?;
    let summary = PairedSummary::new(&config.train_config(0), results);
    write_table(out, &[summary.table_row()])?;
    Ok(RunSummary::Paired {
        table_row: summary.table_row(),
        summary,
    })
}

fn run_community_dir(config: &RunConfig, out: &Path) -> Result<RunSummary> {
    let results: Vec<CommunitySeedResult> = for_each_seed(config, |seed| {
        let dir = seed_dir(out, seed)?;
        let cc = config.community_config(seed);
        let mut failure = None;
        let run = run_community_seed::<f32>(
            &cc,
            checkpoint_writer(&dir.join("checkpoints"), config.checkpoint_interval, config.episodes, &mut failure),
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        if config.episodes == 0 {
            let mut ck = Checkpoint::new::<f32>();
            ck.metadata.insert("episode".into(), 0.into());
            ck.insert("fixed", &run.fixed.params)?;
            for (i, m) in run.members.iter().enumerate() {
                ck.insert(&format!("member_{i}"), &m.params)?;
            }
            ck.save(&dir.join("checkpoints").join("episode_0.json"))?;
        }
        write_metrics(&dir.join("metrics.csv"), &run.metrics)?;
        let records: Vec<TranscriptRecord> = run.test_games.iter().map(|t| TranscriptRecord::from_trajectory(seed, t)).collect();
        transcript::write_jsonl(&dir.join("transcripts.jsonl"), &records)?;
        write_json(&dir.join("summary.json"), &run.result)?;
        info!("seed {seed}: fixed-agent objective {:.3} ± {:.3}", run.result.objective.mean, run.result.objective.std);
        Ok(run.result)
    })?;
    let summary = CommunitySummary::new(&config.community_config(0), results);
    write_table(out, &[summary.table_row()])?;
    Ok(RunSummary::Community {
        table_row: summary.table_row(),
        summary,
    })
}

fn write_table(out: &Path, rows: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(out.join("table.csv"))?;
    w.write_record(["cell"])?;
    for r in rows {
        w.write_record([r])?;
    }
    w.flush()?;
    Ok(())
}

/// Transcript files named by `input`: the file itself, or every
/// `seed_*/transcripts.jsonl` (or a top-level `transcripts.jsonl`) of a run
/// directory.
pub fn transcript_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Config(format!("input {} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("seed_")))
        .map(|p| p.join("transcripts.jsonl"))
        .filter(|p| p.is_file())
        .collect();
    let top = input.join("transcripts.jsonl");
    if top.is_file() {
        files.push(top);
    }
    files.sort();
    Ok(files)
}

fn analyze_dir(config: &RunConfig, out: &Path) -> Result<AnalysisSummary> {
    let mut groups: Vec<Vec<TranscriptRecord>> = Vec::new();
    for input in &config.inputs {
        let mut records = Vec::new();
        for f in transcript_files(input)? {
            records.extend(transcript::read_jsonl(&f)?);
        }
        groups.push(records);
    }
    let all: Vec<TranscriptRecord> = groups.iter().flatten().cloned().collect();
    if all.is_empty() {
        return Err(Error::InsufficientData("no transcripts to analyze".into()));
    }

    let stats = analysis::symbol_stats(&all);
    stats.write_unigram_csv(BufWriter::new(fs::File::create(out.join("unigram.csv"))?))?;
    stats.write_bigram_csv(BufWriter::new(fs::File::create(out.join("bigram.csv"))?))?;

    let per_input: Vec<_> = groups.iter().map(|g| analysis::symbol_stats(g).bigrams(None)).collect();
    let rho = analysis::bigram_rank_correlation(&per_input);
    if groups.len() > 1 {
        let mut w = csv::Writer::from_path(out.join("spearman.csv"))?;
        w.write_record(["first", "second", "rho"])?;
        for (i, row) in rho.iter().enumerate() {
            for (j, r) in row.iter().enumerate() {
                w.write_record([i.to_string(), j.to_string(), r.map_or(String::new(), |v| v.to_string())])?;
            }
        }
        w.flush()?;
    }

    let dataset = ProbeDataset::from_records(&all, config.probe_final_message);
    let (probe, probe_skipped) = match analysis::probe_suite(&dataset, &config.probe) {
        Ok(suite) => {
            write_probe_csv(&out.join("probe.csv"), &suite)?;
            (Some(suite), None)
        }
        Err(Error::InsufficientData(why)) => {
            warn!("probe skipped: {why}");
            (None, Some(why))
        }
        Err(e) => return Err(e),
    };

    let embedding_purity = match &config.checkpoint {
        Some(path) => Some(write_geometry(path, out)?),
        None => None,
    };

    Ok(AnalysisSummary {
        games: all.len(),
        agreements: all.iter().filter(|r| r.is_agreement()).count(),
        top_unigram_share: stats.top_unigram_share(None),
        top_unigram_share_a: stats.top_unigram_share(Some(Role::A)),
        top_unigram_share_b: stats.top_unigram_share(Some(Role::B)),
        probe,
        probe_skipped,
        bigram_spearman: rho,
        embedding_purity,
    })
}

fn write_probe_csv(path: &Path, suite: &ProbeSuite) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "target", "item", "accuracy"])?;
    for (variant, report) in [("probe", &suite.probe), ("zero_input", &suite.zero_input), ("shuffled_labels", &suite.shuffled_labels)] {
        for (k, acc) in report.per_target.iter().enumerate() {
            let target = ["util_a", "util_b", "proposal"][k / 3];
            w.write_record([variant, target, &(k % 3).to_string(), &acc.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Projects the fixed agent's opponent-ID table, labeling each row with the
/// sociality of that community member as recorded in the run config next to
/// the checkpoint (members `0..n_prosocial` are prosocial).
fn write_geometry(checkpoint: &Path, out: &Path) -> Result<f64> {
    let ck = Checkpoint::load(checkpoint)?;
    let table = ck.decode::<f32>("fixed/opponent_ids/table")?;
    let n_prosocial = run_config_near(checkpoint)
        .map(|c| c.n_prosocial)
        .ok_or_else(|| Error::Config(format!("no config.json found above {}", checkpoint.display())))?;
    let rows: Vec<Vec<f64>> = (0..table.rows()).map(|r| table.row(r).iter().map(|v| *v as f64).collect()).collect();
    let labels: Vec<Sociality> = (0..rows.len())
        .map(|i| if i < n_prosocial { Sociality::Prosocial } else { Sociality::Selfish })
        .collect();
    let geometry = analysis::embedding_geometry(&rows, &labels)?;
    analysis::symbols::write_rows(BufWriter::new(fs::File::create(out.join("pca.csv"))?), &geometry.points)?;
    Ok(geometry.purity)
}

fn run_config_near(path: &Path) -> Option<RunConfig> {
    path.ancestors()
        .skip(1)
        .map(|d| d.join("config.json"))
        .find(|p| p.is_file())
        .and_then(|p| fs::read_to_string(p).ok())
        .and_then(|t| RunConfig::from_json(&t).ok())
}

/// Loads the agents of a checkpoint written by a paired run.
pub fn load_paired_agents(path: &Path) -> Result<[AgentParams<f32>; 2]> {
    let ck = Checkpoint::load(path)?;
    let config = |name: &str| -> Result<AgentConfig> {
        let v = ck
            .metadata
            .get(&format!("{name}/config"))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: no agent config in metadata")))?;
        Ok(serde_json::from_value(v.clone())?)
    };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut out = Vec::new();
    for name in ["agent_a", "agent_b"] {
        let mut params = AgentParams::new(config(name)?, &mut rng);
        ck.load_into(name, &mut params)?;
        out.push(params);
    }
    let b = out.pop().expect("two agents");
    let a = out.pop().expect("two agents");
    Ok([a, b])
}

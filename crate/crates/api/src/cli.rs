use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dpsir_core::corpus::RedactionMap;
use dpsir_core::engine::{Workbench, DEFAULT_K};
use dpsir_core::fixtures::{self, FixtureCorpus, FIXTURE_SEED};
use dpsir_core::gateway::{ProviderConfig, ProviderKind};
use dpsir_core::layout::LayoutKind;
use dpsir_core::store::{import_workspace, Workspace};
use dpsir_core::taxonomy::{Edit, IndicatorKind, Rule, RuleCondition, RuleValue, Step, VariableRef};
use serde_json::{json, Value};

use crate::config::{ApiConfig, ProviderSettings};
use crate::server::{self, LayoutQuery};

#[derive(Debug, Parser)]
#[command(name = "dpsir", version, about = "Mine DPSIR structure from interview transcripts")]
pub struct Cli {
    /// Workspace directory.
    #[arg(long, short = 'w', global = true, default_value = ".")]
    pub workspace: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ProviderArg::Fixture)]
    pub provider: ProviderArg,
    /// Fixture directory for `--provider fixture` (defaults to the bundled corpus).
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    /// Base URL of an OpenAI-compatible endpoint for `--provider remote`.
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, global = true)]
    pub api_key_var: Option<String>,
    /// Generation model for `--provider remote`.
    #[arg(long, global = true)]
    pub model: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderArg {
    Fixture,
    Remote,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Transcript ingestion and segmentation.
    #[command(subcommand)]
    Corpus(CorpusCommand),
    /// Taxonomy versions.
    #[command(subcommand)]
    Version(VersionCommand),
    /// Run one mining step on a version and write its results.
    Mine(MineArgs),
    /// Print the rule-adjusted results of a version.
    Results {
        #[arg(long)]
        version: String,
        /// Per-snippet uncertainty summaries instead of full results.
        #[arg(long)]
        summaries: bool,
    },
    /// User rules.
    #[command(subcommand)]
    Rule(RuleCommand),
    /// Export a layout (JSON or SVG) or the whole workspace archive.
    Export(ExportArgs),
    /// Restore a workspace archive into a new directory.
    Import { archive: PathBuf, dest: PathBuf },
    /// Evidence spans of a snippet.
    Evidence {
        snippet: String,
        #[arg(long)]
        version: Option<String>,
    },
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Bundled fixture corpus.
    #[command(subcommand)]
    Fixtures(FixturesCommand),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCommand {
    /// Ingest a directory or tar archive of `.tsv` transcripts.
    Ingest {
        source: PathBuf,
        /// JSON object mapping names to replacements.
        #[arg(long)]
        redact: Option<PathBuf>,
    },
    /// Segment documents that have no snippets yet.
    Segment {
        /// One interview question per line.
        #[arg(long)]
        questions: PathBuf,
    },
    /// List documents.
    List,
    /// List snippets.
    Snippets,
}

#[derive(Debug, Subcommand)]
pub enum VersionCommand {
    Create {
        #[arg(long, value_parser = parse_step)]
        step: Step,
        #[arg(long)]
        parent: Option<String>,
        /// JSON array of edits.
        #[arg(long)]
        edits: Option<PathBuf>,
    },
    List {
        #[arg(long, value_parser = parse_step)]
        step: Option<Step>,
    },
    Show {
        id: String,
    },
    Lineage {
        id: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MineStep {
    Indicators,
    Variables,
    Links,
}

impl MineStep {
    fn step(self) -> Step {
        match self {
            MineStep::Indicators => Step::IndicatorId,
            MineStep::Variables => Step::VariableId,
            MineStep::Links => Step::LinkId,
        }
    }
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[arg(value_enum)]
    pub step: MineStep,
    #[arg(long)]
    pub version: String,
    #[arg(long, default_value_t = DEFAULT_K, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub k: usize,
    /// Result file (default `<workspace>/exports/results-<version>.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum RuleCommand {
    List {
        #[arg(long)]
        snippet: Option<String>,
    },
    Add(RuleArgs),
    Remove {
        id: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConditionArg {
    MustHave,
    MustNotHave,
}

#[derive(Debug, Args)]
pub struct RuleArgs {
    #[arg(long)]
    pub snippet: String,
    #[arg(long, value_enum)]
    pub condition: ConditionArg,
    /// Indicator value, e.g. `Pressure`.
    #[arg(long, conflicts_with_all = ["variable", "link"])]
    pub indicator: Option<IndicatorKind>,
    /// Variable value as `Indicator/name`.
    #[arg(long, value_parser = parse_variable, conflicts_with = "link")]
    pub variable: Option<VariableRef>,
    /// Link value as `Indicator/source,Indicator/target`.
    #[arg(long)]
    pub link: Option<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Layout kind: uncertainty, keywords, linkgraph or dpsir.
    #[arg(long, value_parser = parse_layout_kind, conflicts_with = "archive")]
    pub layout: Option<LayoutKind>,
    #[arg(long)]
    pub version: Option<String>,
    /// Hidden DPSIR blocks, comma separated.
    #[arg(long)]
    pub hide: Option<String>,
    /// Opened DPSIR blocks, comma separated.
    #[arg(long)]
    pub open: Option<String>,
    /// Snippet for a link graph.
    #[arg(long)]
    pub snippet: Option<String>,
    /// Write an SVG rendering here.
    #[arg(long)]
    pub svg: Option<PathBuf>,
    /// Write the layout document here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also store the layout in the workspace.
    #[arg(long)]
    pub save: bool,
    /// Write a workspace archive here.
    #[arg(long)]
    pub archive: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = DEFAULT_K, value_parser = clap::builder::RangedU64ValueParser::<usize>::new().range(1..))]
    pub k: usize,
    /// Allowed CORS origin; repeatable.
    #[arg(long)]
    pub cors: Vec<String>,
    /// Shared bearer token.
    #[arg(long, env = "DPSIR_TOKEN")]
    pub token: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum FixturesCommand {
    /// Write the fixture corpus (transcripts, answer key, keyed replies).
    Generate {
        #[arg(long, default_value_t = FIXTURE_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a complete fixture workspace: segmented corpus, five executed
    /// versions and stored layouts.
    Workspace {
        #[arg(long, default_value_t = FIXTURE_SEED)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_step(raw: &str) -> Result<Step, String> {
    server::parse_step(raw)
}

fn parse_layout_kind(raw: &str) -> Result<LayoutKind, String> {
    LayoutKind::from_slug(raw).ok_or_else(|| format!("unknown layout kind {raw:?}"))
}

fn parse_variable(raw: &str) -> Result<VariableRef, String> {
    VariableRef::parse_key(raw).ok_or_else(|| format!("expected Indicator/name, got {raw:?}"))
}

impl Cli {
    pub fn provider_settings(&self) -> ProviderSettings {
        match self.provider {
            ProviderArg::Fixture => ProviderSettings::Fixture {
                dir: self.fixtures.clone().unwrap_or_else(fixtures::shipped_dir),
            },
            ProviderArg::Remote => {
                let mut config = ProviderConfig::new(ProviderKind::RemoteHttp);
                if let Some(m) = &self.model {
                    config.model_name = m.clone();
                }
                ProviderSettings::Remote {
                    base_url: self.base_url.clone(),
                    api_key_var: self.api_key_var.clone(),
                    config,
                }
            }
        }
    }

    fn open(&self, k: usize) -> anyhow::Result<Workbench> {
        let store = Workspace::open(&self.workspace)
            .with_context(|| format!("opening workspace {}", self.workspace.display()))?;
        let settings = self.provider_settings();
        Ok(Workbench::open(store, settings.build()?, settings.engine_config(k))?)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let raw = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
}

fn write_file(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty(value: &impl serde::Serialize) -> anyhow::Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Runs one command and returns the JSON it prints.
pub async fn run(cli: Cli) -> anyhow::Result<Value> {
    match &cli.command {
        Command::Corpus(c) => corpus(&cli, c).await,
        Command::Version(c) => version(&cli, c),
        Command::Mine(args) => mine(&cli, args).await,
        Command::Results { version, summaries } => {
            let wb = cli.open(DEFAULT_K)?;
            Ok(if *summaries {
                serde_json::to_value(wb.snippet_summaries(version)?)?
            } else {
                serde_json::to_value(wb.results(version)?)?
            })
        }
        Command::Rule(c) => rule(&cli, c),
        Command::Export(args) => export(&cli, args).await,
        Command::Import { archive, dest } => {
            import_workspace(archive, dest)?;
            Ok(json!({ "imported": dest }))
        }
        Command::Evidence { snippet, version } => {
            let wb = cli.open(DEFAULT_K)?;
            Ok(serde_json::to_value(wb.evidence(snippet, version.as_deref())?)?)
        }
        Command::Serve(args) => {
            let mut config = ApiConfig::new(&cli.workspace, cli.provider_settings());
            config.bind = args.bind;
            config.k = args.k;
            config.cors = args.cors.clone();
            config.token = args.token.clone();
            server::serve(config).await?;
            Ok(json!({ "stopped": true }))
        }
        Command::Fixtures(FixturesCommand::Generate { seed, out }) => {
            FixtureCorpus::generate(*seed).await.write_dir(out)?;
            Ok(json!({ "written": out }))
        }
        Command::Fixtures(FixturesCommand::Workspace { seed, out }) => {
            let wb = fixtures::generate_fixture_workspace(*seed, out).await?;
            Ok(json!({
                "workspace": out,
                "snippets": wb.snippets()?.len(),
                "versions": wb.versions(None).iter().map(|v| v.id.clone()).collect::<Vec<_>>(),
            }))
        }
    }
}

async fn corpus(cli: &Cli, c: &CorpusCommand) -> anyhow::Result<Value> {
    let mut wb = cli.open(DEFAULT_K)?;
    match c {
        CorpusCommand::Ingest { source, redact } => {
            let redaction: Option<RedactionMap> = redact.as_deref().map(read_json).transpose()?;
            let report = wb.ingest(source, redaction.as_ref())?;
            Ok(json!({
                "documents": report.documents.iter().map(|d| &d.id).collect::<Vec<_>>(),
                "errors": report.errors.iter().map(|e| e.to_string()).collect::<Vec<_>>(),
            }))
        }
        CorpusCommand::Segment { questions } => {
            let raw = fs::read_to_string(questions).with_context(|| format!("reading {}", questions.display()))?;
            let qs: Vec<String> = raw
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_owned)
                .collect();
            let snippets = wb.segment(&qs).await?;
            wb.persist_caches()?;
            Ok(serde_json::to_value(snippets)?)
        }
        CorpusCommand::List => Ok(serde_json::to_value(wb.documents()?)?),
        CorpusCommand::Snippets => Ok(serde_json::to_value(wb.snippets()?)?),
    }
}

fn version(cli: &Cli, c: &VersionCommand) -> anyhow::Result<Value> {
    let mut wb = cli.open(DEFAULT_K)?;
    match c {
        VersionCommand::Create { step, parent, edits } => {
            let edits: Vec<Edit> = edits.as_deref().map(read_json).transpose()?.unwrap_or_default();
            Ok(serde_json::to_value(wb.create_version(
                *step,
                parent.as_deref(),
                &edits,
            )?)?)
        }
        VersionCommand::List { step } => Ok(serde_json::to_value(wb.versions(*step))?),
        VersionCommand::Show { id } => Ok(serde_json::to_value(wb.version(id)?)?),
        VersionCommand::Lineage { id } => Ok(serde_json::to_value(wb.lineage(id)?)?),
    }
}

async fn mine(cli: &Cli, args: &MineArgs) -> anyhow::Result<Value> {
    let mut wb = cli.open(args.k)?;
    let found = wb.version(&args.version)?.step;
    if found != args.step.step() {
        bail!(
            "version {} is a {found:?} version, not {:?}",
            args.version,
            args.step.step()
        );
    }
    let result = wb.execute(&args.version, Some(args.k)).await?;
    let effective = wb.results(&args.version)?;
    let out = args.out.clone().unwrap_or_else(|| {
        cli.workspace
            .join("exports")
            .join(format!("results-{}.json", args.version))
    });
    write_file(&out, pretty(&effective)?.as_bytes())?;
    Ok(json!({
        "result_id": result.id,
        "version_id": result.version_id,
        "k": result.k,
        "runsets": result.runsets.len(),
        "links": result.links.len(),
        "warnings": result.warnings,
        "rule_warnings": effective.rule_warnings,
        "out": out,
    }))
}

fn rule(cli: &Cli, c: &RuleCommand) -> anyhow::Result<Value> {
    let mut wb = cli.open(DEFAULT_K)?;
    match c {
        RuleCommand::List { snippet } => {
            let rules: std::collections::BTreeMap<&str, &Rule> =
                wb.rules().list(snippet.as_deref()).into_iter().collect();
            Ok(serde_json::to_value(rules)?)
        }
        RuleCommand::Add(args) => {
            let value = match (&args.indicator, &args.variable, &args.link) {
                (Some(indicator), None, None) => RuleValue::Indicator { indicator: *indicator },
                (None, Some(variable), None) => RuleValue::Variable {
                    variable: variable.clone(),
                },
                (None, None, Some(link)) => {
                    let (s, t) = link
                        .split_once(',')
                        .context("expected --link Indicator/source,Indicator/target")?;
                    RuleValue::Link {
                        source: parse_variable(s.trim()).map_err(anyhow::Error::msg)?,
                        target: parse_variable(t.trim()).map_err(anyhow::Error::msg)?,
                    }
                }
                _ => bail!("give exactly one of --indicator, --variable or --link"),
            };
            let condition = match args.condition {
                ConditionArg::MustHave => RuleCondition::MustHave,
                ConditionArg::MustNotHave => RuleCondition::MustNotHave,
            };
            let id = wb.add_rule(Rule {
                snippet_id: args.snippet.clone(),
                condition,
                value,
            })?;
            Ok(json!({ "id": id }))
        }
        RuleCommand::Remove { id } => Ok(serde_json::to_value(wb.remove_rule(id)?)?),
    }
}

async fn export(cli: &Cli, args: &ExportArgs) -> anyhow::Result<Value> {
    let mut wb = cli.open(DEFAULT_K)?;
    if let Some(archive) = &args.archive {
        wb.export(archive)?;
        return Ok(json!({ "archive": archive }));
    }
    let Some(kind) = args.layout else {
        bail!("give --layout <kind> or --archive <path>");
    };
    let query = LayoutQuery {
        version: args.version.clone(),
        hide: args.hide.clone(),
        open: args.open.clone(),
        snippet: args.snippet.clone(),
        format: None,
    };
    let req = server::layout_request(&wb, kind, &query).map_err(|e| anyhow::anyhow!("{e:?}"))?;
    let doc = wb.layout(&req).await?;
    if args.save {
        wb.save_layout(&doc)?;
    }
    let mut written = Vec::new();
    if let Some(svg) = &args.svg {
        write_file(svg, doc.svg().as_bytes())?;
        written.push(svg.clone());
    }
    if let Some(out) = &args.out {
        write_file(out, pretty(&doc)?.as_bytes())?;
        written.push(out.clone());
    }
    if written.is_empty() {
        Ok(serde_json::to_value(&doc)?)
    } else {
        Ok(json!({ "layout": doc.id(), "written": written }))
    }
}

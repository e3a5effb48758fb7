//! Template administration: check, correct, approve, and emit training data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{Context, Result};
use chrono::Utc;
use clap::{Parser, Subcommand};
use sati_core::concept_kb::KnowledgeBase;
use sati_core::forge::{
    build_dpo_pairs, build_sft_records, check_text, generation_prompt, write_jsonl, CheckerConfig, CorrectError,
    Corpus, Corrector, GuidanceLevel, RarestTokenJudge, TemplateLibrary, DEFAULT_AUGMENTATIONS,
};
use sati_core::providers::{HashEmbedder, ProviderSettings, Providers};
use sati_core::script::GuidanceScript;
use sati_core::VectorIndex;

#[derive(Parser)]
#[command(name = "forge", about = "Safety template checks and dataset emission")]
struct Cli {
    /// Template corpus JSON. Defaults to the bundled corpus.
    #[arg(long, global = true, env = "TEMPLATE_CORPUS")]
    corpus: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check a script file; exits 1 when it fails.
    Check {
        file: PathBuf,
        #[arg(long, default_value_t = 10)]
        duration: u32,
    },
    /// Repair a failing script and print it; exits 1 when it stays broken.
    Correct {
        file: PathBuf,
        #[arg(long, default_value_t = 10)]
        duration: u32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write SFT records for the approved corpus and the KB concepts.
    EmitSft {
        #[arg(long)]
        out: PathBuf,
    },
    /// Write DPO pairs for one draft and its expert edit.
    EmitDpo {
        #[arg(long)]
        draft: PathBuf,
        #[arg(long)]
        edit: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        goal: String,
        #[arg(long, default_value_t = 10)]
        duration: u32,
        #[arg(long, default_value = "more")]
        guidance: String,
        /// Malformed variants per pair.
        #[arg(short, long, default_value_t = DEFAULT_AUGMENTATIONS)]
        k: usize,
    },
    /// Approve a draft or edited template in the corpus file.
    Approve {
        id: String,
        #[arg(long)]
        by: String,
    },
}

fn read_script(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_script(path: &Path) -> Result<GuidanceScript> {
    GuidanceScript::parse(&read_script(path)?).map_err(|e| anyhow::anyhow!("{}: line {}: {}", path.display(), e.line, e.message))
}

fn load_corpus(path: Option<&Path>) -> Result<Corpus> {
    match path {
        Some(p) => Corpus::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Corpus::default_fixture()),
    }
}

fn write_atomic(path: &Path, body: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let kb = KnowledgeBase::default_fixture();
    match cli.cmd {
        Cmd::Check { file, duration } => {
            let (_, report) = check_text(&read_script(&file)?, duration, &kb);
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Cmd::Correct { file, duration, out } => {
            let src = read_script(&file)?;
            let (script, report) = check_text(&src, duration, &kb);
            let script = script.context("script does not parse; fix the markup first")?;
            let providers = Providers::from_settings(&ProviderSettings::from_env()?)?;
            let config = CheckerConfig::default();
            let corrector = Corrector {
                kb: &kb,
                config: &config,
                judge: &RarestTokenJudge,
                chat: providers.chat.as_ref(),
                model_id: &providers.model_id,
            };
            match corrector.correct(&script, &report, duration) {
                Ok(c) => {
                    let text = c.script.to_text();
                    match out {
                        Some(p) => std::fs::write(&p, &text)?,
                        None => print!("{text}"),
                    }
                    eprintln!("corrected in {} round(s)", c.rounds);
                    Ok(ExitCode::SUCCESS)
                }
                Err(CorrectError::Uncorrectable { report, rounds, .. }) => {
                    eprintln!("still failing after {rounds} rounds");
                    println!("{}", serde_json::to_string_pretty(&report)?);
                    Ok(ExitCode::from(1))
                }
                Err(e) => Err(e.into()),
            }
        }
        Cmd::EmitSft { out } => {
            let corpus = load_corpus(cli.corpus.as_deref())?;
            let approved: Vec<_> = corpus.templates.into_iter().filter(|t| t.is_approved()).collect();
            let records = build_sft_records(&approved, kb.concepts());
            let mut w = BufWriter::new(File::create(&out)?);
            write_jsonl(&mut w, &records)?;
            w.flush()?;
            eprintln!("{} records -> {}", records.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::EmitDpo { draft, edit, out, goal, duration, guidance, k } => {
            let guidance: GuidanceLevel = serde_json::from_value(serde_json::Value::String(guidance.to_lowercase()))
                .context("guidance must be `more` or `less`")?;
            let prompt = generation_prompt(&goal, duration, guidance);
            let pairs = build_dpo_pairs(&parse_script(&draft)?, &parse_script(&edit)?, &prompt, duration, &kb, k)?;
            let mut w = BufWriter::new(File::create(&out)?);
            write_jsonl(&mut w, &pairs)?;
            w.flush()?;
            eprintln!("{} pairs -> {}", pairs.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Approve { id, by } => {
            let path = cli.corpus.context("--corpus is required to approve")?;
            let corpus = load_corpus(Some(&path))?;
            let embedder = Arc::new(HashEmbedder::default());
            let index = Arc::new(VectorIndex::new(sati_core::providers::Embedder::dim(embedder.as_ref())));
            let lib = TemplateLibrary::new(corpus, Arc::new(kb), embedder, index)?;
            let t = lib.approve(&id, &by, Utc::now())?;
            write_atomic(&path, &lib.corpus().to_json())?;
            eprintln!("approved {} ({} {} min {})", t.template_id, t.goal, t.duration_min, t.guidance_level.as_str());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

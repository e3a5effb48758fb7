//! Engagement and significance tests over study data.

use std::path::PathBuf;

use anyhow::{Context, Result};
use chrono::NaiveDate;
use clap::{Parser, Subcommand};
use sati_cli::{holm, read_columns_from, run_test, TestMethod};
use sati_core::analytics::{format_mean_sd, DateWindow};
use sati_core::session::{Condition, EventLog, ServiceConfig, ServiceParts, SessionService};

#[derive(Parser)]
#[command(name = "analytics", about = "Engagement and nonparametric tests")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-user engagement (completed sessions per day) from a service event log.
    Engagement {
        #[arg(long)]
        from: NaiveDate,
        /// Exclusive end date.
        #[arg(long)]
        to: NaiveDate,
        /// Summarise per condition instead of listing users.
        #[arg(long)]
        by_condition: bool,
        #[arg(long)]
        condition: Option<Condition>,
        /// Event log; defaults to $DATA_DIR/events.jsonl.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Run one test over a CSV with a header row and one column per group.
    Test {
        #[arg(long, value_enum)]
        method: TestMethod,
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Holm-Bonferroni adjust the first CSV column.
    Holm {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn events_path(explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    let dir = std::env::var("DATA_DIR").context("pass --events or set DATA_DIR")?;
    Ok(PathBuf::from(dir).join("events.jsonl"))
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Engagement { from, to, by_condition, condition, events } => {
            let path = events_path(events)?;
            let log = EventLog::snapshot(&path).with_context(|| format!("reading {}", path.display()))?;
            let svc = SessionService::new(ServiceParts::mock(), ServiceConfig::default(), log)?;
            let window = DateWindow::new(from, to)?;
            let mut out = csv::Writer::from_writer(std::io::stdout());
            if by_condition {
                out.write_record(["condition", "users", "engagement"])?;
                let conditions = condition.map_or(Condition::ALL.to_vec(), |c| vec![c]);
                for c in conditions {
                    let r = svc.engagement(window, Some(c))?;
                    let rates: Vec<f64> = r.per_user.iter().map(|u| u.rate).collect();
                    out.write_record([c.as_str(), &rates.len().to_string(), &format_mean_sd(&rates)])?;
                }
            } else {
                out.write_record(["user_id", "sessions", "days", "rate"])?;
                for u in svc.engagement(window, condition)?.per_user {
                    out.write_record([u.user_id, u.sessions_count.to_string(), u.days.to_string(), u.rate.to_string()])?;
                }
            }
            out.flush()?;
        }
        Cmd::Test { method, input } => {
            let result = run_test(method, &read_columns_from(&input)?)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Cmd::Holm { input } => {
            let mut out = csv::Writer::from_writer(std::io::stdout());
            out.write_record(["p", "adjusted"])?;
            for (p, a) in holm(&read_columns_from(&input)?)? {
                out.write_record([p.to_string(), a.to_string()])?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

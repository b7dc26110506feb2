use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};

use gaia_core::sim::{simulate, write_csv, SimConfig};
use gaia_service::client::Client;
use gaia_service::config::{config_path, load_config};

#[derive(Parser)]
#[command(name = "gaia", version, about = "School building energy telemetry service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Remote {
    /// Base URL of a running service.
    #[arg(long, global = true, env = "GAIA_URL", default_value = "http://127.0.0.1:8080")]
    url: String,
    /// Bearer token of the acting user.
    #[arg(long, global = true, env = "GAIA_TOKEN")]
    token: Option<String>,
}

impl Remote {
    fn client(&self) -> Client {
        Client::new(&self.url, self.token.clone())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP/WebSocket service until interrupted.
    Serve {
        /// Falls back to $GAIA_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a deterministic reading stream.
    Sim {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: DateTime<Utc>,
        #[arg(long)]
        to: DateTime<Utc>,
        /// Write `series_id,timestamp,kind,value` CSV here.
        #[arg(long, conflicts_with = "post", required_unless_present = "post")]
        out: Option<PathBuf>,
        /// Post the stream to this service URL instead.
        #[arg(long)]
        post: Option<String>,
        #[arg(long, env = "GAIA_TOKEN")]
        token: Option<String>,
        #[arg(long, default_value_t = 500)]
        batch: usize,
    },
    /// Manage rules on a running service.
    Rules {
        #[command(subcommand)]
        action: RulesAction,
        #[command(flatten)]
        remote: Remote,
    },
    /// Upload a `timestamp,value` CSV into a series.
    Upload {
        #[arg(long)]
        series: String,
        #[arg(long)]
        file: PathBuf,
        /// Resource path, for a series that does not exist yet.
        #[arg(long)]
        path: Option<String>,
        /// 900 or 3600, for a series that does not exist yet.
        #[arg(long)]
        interval: Option<u32>,
        #[command(flatten)]
        remote: Remote,
    },
}

#[derive(Subcommand)]
enum RulesAction {
    /// Rules applying to a resource, inherited ones included.
    List {
        #[arg(long)]
        path: String,
    },
    /// Create or replace a rule from a JSON body file
    /// (`{name, condition, category, suggestion, cooldown_s, enabled}`).
    Put {
        #[arg(long)]
        path: String,
        #[arg(long)]
        id: String,
        #[arg(long)]
        file: PathBuf,
    },
    Delete {
        #[arg(long)]
        path: String,
        #[arg(long)]
        id: String,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn print_json(v: &serde_json::Value) {
    // A closed pipe (`gaia rules list | head`) is not an error worth reporting.
    let _ = writeln!(
        std::io::stdout(),
        "{}",
        serde_json::to_string_pretty(v).expect("json value")
    );
}

fn serve(config: Option<PathBuf>) -> CliResult {
    let path = config_path(config).ok_or("no configuration: pass --config or set GAIA_CONFIG")?;
    let cfg = load_config(&path)?;
    env_logger::Builder::new()
        .filter_level(cfg.log_level)
        .parse_default_env()
        .init();
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let handle = gaia_service::run(cfg).await?;
        eprintln!("gaia listening on http://{}", handle.addr());
        tokio::signal::ctrl_c().await?;
        handle.stop().await?;
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn sim(
    config: PathBuf,
    from: DateTime<Utc>,
    to: DateTime<Utc>,
    out: Option<PathBuf>,
    post: Option<String>,
    token: Option<String>,
    batch: usize,
) -> CliResult {
    let cfg: SimConfig = serde_json::from_str(&std::fs::read_to_string(&config)?)?;
    let readings = simulate(&cfg, from, to)?;
    match (out, post) {
        (Some(out), _) => {
            let mut w = BufWriter::new(File::create(&out)?);
            write_csv(&readings, &mut w)?;
            w.flush()?;
            eprintln!("{} readings written to {}", readings.len(), out.display());
        }
        (None, Some(url)) => {
            let url = url.trim_end_matches('/').trim_end_matches("/api/v1/readings");
            let client = Client::new(url, token);
            let mut failed = 0;
            for chunk in readings.chunks(batch.max(1)) {
                let answer = client.post_readings(chunk)?;
                let errors = answer["errors"].as_array().map_or(0, Vec::len);
                if errors > 0 {
                    eprintln!("{errors} readings rejected: {}", answer["errors"]);
                }
                failed += errors;
            }
            eprintln!("{} readings posted, {failed} rejected", readings.len());
        }
        (None, None) => unreachable!("clap requires --out or --post"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: CliResult = match cli.command {
        Command::Serve { config } => serve(config),
        Command::Sim {
            config,
            from,
            to,
            out,
            post,
            token,
            batch,
        } => sim(config, from, to, out, post, token, batch),
        Command::Rules { action, remote } => {
            let client = remote.client();
            match action {
                RulesAction::List { path } => client.list_rules(&path).map(|v| print_json(&v)),
                RulesAction::Put { path, id, file } => match std::fs::read_to_string(&file)
                    .map_err(|e| e.into())
                    .and_then(|t| serde_json::from_str(&t).map_err(Box::<dyn std::error::Error>::from))
                {
                    Ok(body) => client.put_rule(&path, &id, &body).map(|v| print_json(&v)),
                    Err(e) => {
                        eprintln!("gaia: {}: {e}", file.display());
                        return ExitCode::FAILURE;
                    }
                },
                RulesAction::Delete { path, id } => client.delete_rule(&path, &id),
            }
            .map_err(Into::into)
        }
        Command::Upload {
            series,
            file,
            path,
            interval,
            remote,
        } => std::fs::read(&file).map_err(Into::into).and_then(|csv| {
            let report = remote.client().upload(&series, csv, path.as_deref(), interval)?;
            print_json(&report);
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gaia: {e}");
            ExitCode::FAILURE
        }
    }
}

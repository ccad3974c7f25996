use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use iie_core::annotation::FormConfig;
use iie_core::eval::{ExactOnly, SemanticOracle};
use iie_core::gateway::GatewayConfig;
use iie_core::nli::NliScorer;
use iie_core::pipeline::{parse_input, Pipeline, PipelineConfig};
use iie_harness::commands::{self, ChatOptions, LlmOracle};
use iie_harness::service::{self, AppState, ResponseStore};
use iie_harness::{HarnessError, Result};

#[derive(Parser)]
#[command(name = "iie", version, about = "Implicit information extraction harness")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Base URL of the chat-completion or NLI scoring endpoint.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true, default_value = "gpt-3.5-turbo")]
    model: String,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Requests in flight at once.
    #[arg(long, global = true, default_value_t = 4)]
    concurrency: usize,
    /// Replay file used instead of a live endpoint.
    #[arg(long, global = true, value_name = "REPLAY_FILE")]
    mock: Option<PathBuf>,
    #[arg(long, global = true, env = "IIE_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the extraction pipeline over a sentence file or JSONL manifest.
    Run {
        input: PathBuf,
        /// Ordered pairs per temporal-relation prompt.
        #[arg(long, default_value_t = PipelineConfig::default().pair_batch_size)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long, default_value_t = GatewayConfig::default().max_retries)]
        max_retries: u32,
        /// Minimum spacing between request starts.
        #[arg(long, default_value_t = 0)]
        min_interval_ms: u64,
        /// Directory of prompt template overrides.
        #[arg(long)]
        prompts: Option<PathBuf>,
    },
    /// Read triplets from stdin, one per line, and print hypothesis sentences.
    Verbalize {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Build agreement reports from annotation responses.
    Eval {
        #[arg(long)]
        forms: PathBuf,
        /// JSONL response files or directories of them.
        #[arg(long, required = true, num_args = 1..)]
        responses: Vec<PathBuf>,
        /// Judge semantic matches with the chat endpoint (or --mock) instead of exact matching only.
        #[arg(long)]
        llm_judge: bool,
    },
    /// Score verbalized triplets with an NLI endpoint (or a --mock stub table).
    ProbeNli {
        #[arg(long)]
        forms: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        responses: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate annotation form bundles from a `run` output directory.
    Forms {
        run_dir: PathBuf,
        #[arg(long, default_value = "form")]
        prefix: String,
        #[arg(long, default_value_t = FormConfig::default().group_size)]
        group_size: usize,
        /// Allow a final form with fewer sentences than the group size.
        #[arg(long)]
        allow_short: bool,
    },
    /// Serve forms and collect responses.
    Serve {
        #[arg(long)]
        forms: PathBuf,
        /// Directory of append-only response files.
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Token for the response export endpoint.
        #[arg(long, env = "IIE_OPERATOR_TOKEN", hide_env_values = true)]
        operator_token: String,
        /// Static UI assets served for non-API paths.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

fn chat_options(c: &Common, gateway: GatewayConfig, prompts: Option<PathBuf>) -> ChatOptions {
    ChatOptions {
        endpoint: c.endpoint.clone(),
        api_key: c.api_key.clone(),
        mock: c.mock.clone(),
        prompts,
        gateway,
    }
}

fn gateway_config(c: &Common) -> GatewayConfig {
    GatewayConfig {
        model_id: c.model.clone(),
        concurrency: c.concurrency.max(1),
        ..GatewayConfig::default()
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match cli.command {
        Command::Run {
            input,
            batch_size,
            temperature,
            max_retries,
            min_interval_ms,
            prompts,
        } => {
            let gw = GatewayConfig {
                temperature,
                max_retries,
                min_interval_ms,
                ..gateway_config(c)
            };
            let gateway = commands::build_gateway(&chat_options(c, gw, prompts))?;
            let pipeline = Pipeline::new(
                gateway,
                PipelineConfig {
                    pair_batch_size: batch_size.max(1),
                    ..PipelineConfig::default()
                },
            );
            let inputs = parse_input(&commands::read(&input)?)?;
            let manifest = commands::run_sentences(&pipeline, &inputs, c.concurrency, &c.out)?;
            for s in &manifest.sentences {
                match &s.error {
                    None => println!("ok     {}", s.id),
                    Some(e) => println!("failed {}: {e}", s.id),
                }
            }
            match manifest.failed() {
                0 => Ok(()),
                failed => Err(HarnessError::RunsFailed {
                    failed,
                    total: manifest.sentences.len(),
                }),
            }
        }
        Command::Verbalize { config } => {
            let cfg = commands::load_verbalizer_config(config.as_deref())?;
            let mut text = String::new();
            std::io::stdin()
                .read_to_string(&mut text)
                .map_err(|source| HarnessError::Io {
                    path: "<stdin>".into(),
                    source,
                })?;
            let mut stdout = std::io::stdout().lock();
            let mut bad = 0;
            for r in commands::verbalize_lines(&text, &cfg) {
                match r {
                    Ok(s) => {
                        let _ = writeln!(stdout, "{s}");
                    }
                    Err(e) => {
                        bad += 1;
                        eprintln!("{e}");
                    }
                }
            }
            if bad > 0 {
                return Err(HarnessError::Usage(format!("{bad} line(s) could not be parsed")));
            }
            Ok(())
        }
        Command::Eval {
            forms,
            responses,
            llm_judge,
        } => {
            let judge = if llm_judge {
                let gateway = commands::build_gateway(&chat_options(c, gateway_config(c), None))?;
                Some(LlmOracle::new(Pipeline::new(gateway, PipelineConfig::default())))
            } else {
                None
            };
            let oracle: &dyn SemanticOracle = match &judge {
                Some(j) => j,
                None => &ExactOnly,
            };
            let report = commands::run_eval(&forms, &responses, oracle, &c.out)?;
            if let Some(j) = &judge {
                commands::write(
                    &c.out.join("judge_transcript.json"),
                    j.transcript().to_replay().to_json(),
                )?;
            }
            print!("{}", report.to_table());
            Ok(())
        }
        Command::ProbeNli {
            forms,
            responses,
            config,
        } => {
            let cfg = commands::load_verbalizer_config(config.as_deref())?;
            let scorer: Box<dyn NliScorer> = match (&c.mock, &c.endpoint) {
                (Some(path), _) => Box::new(commands::stub_scorer_from_file(path)?),
                (None, Some(endpoint)) => Box::new(commands::http_scorer(endpoint)?),
                (None, None) => return Err(HarnessError::Usage("either --endpoint or --mock is required".into())),
            };
            let report = commands::run_nli(&forms, &responses, scorer.as_ref(), &cfg, c.concurrency, &c.out)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Forms {
            run_dir,
            prefix,
            group_size,
            allow_short,
        } => {
            let cfg = FormConfig {
                group_size: group_size.max(1),
                allow_short,
            };
            for path in commands::make_forms(&run_dir, &prefix, c.seed, &cfg, &c.out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Serve {
            forms,
            responses,
            addr,
            operator_token,
            static_dir,
        } => {
            if operator_token.trim().is_empty() {
                return Err(HarnessError::Usage("operator token must not be empty".into()));
            }
            let state = Arc::new(AppState {
                forms: service::load_forms(&forms)?,
                store: ResponseStore::open(&responses)?,
                operator_token,
            });
            let app = service::router(state.clone(), static_dir.as_deref());
            let rt = tokio::runtime::Runtime::new().map_err(|source| HarnessError::Io {
                path: "<runtime>".into(),
                source,
            })?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr)
                    .await
                    .map_err(|source| HarnessError::Io {
                        path: addr.to_string().into(),
                        source,
                    })?;
                eprintln!("serving {} form(s) on http://{addr}", state.forms.len());
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await
                    .map_err(|source| HarnessError::Io {
                        path: addr.to_string().into(),
                        source,
                    })
            })
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

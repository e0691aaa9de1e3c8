//! The `sim` command line: `launch` runs a world with its comms server;
//! `topic`, `clients` and `call` inspect a running one.

pub mod inspect;
pub mod launch;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use fleetsim_comms::{DEFAULT_PORT, DEFAULT_WS_PORT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_BIND: i32 = 3;
pub const EXIT_UNREACHABLE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sim", version, about = "Multi-vehicle ground robot simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a world file with its comms server.
    Launch(LaunchOptions),
    /// Inspect topics on a running simulator.
    Topic {
        #[command(subcommand)]
        command: TopicCommand,
    },
    /// List the clients connected to a running simulator.
    Clients {
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Invoke a service and print its JSON reply.
    Call {
        service: String,
        /// Request body as JSON.
        #[arg(default_value = "{}")]
        request: String,
        #[command(flatten)]
        server: ServerArg,
    },
}

#[derive(Debug, Subcommand)]
pub enum TopicCommand {
    /// One row per topic: name, type, publishers, subscribers, rate.
    List {
        #[command(flatten)]
        server: ServerArg,
        #[arg(long)]
        json: bool,
    },
    /// Print every message on a topic as a JSON line.
    Echo {
        topic: String,
        #[command(flatten)]
        server: ServerArg,
        /// Stop after this many messages.
        #[arg(short = 'n', long)]
        count: Option<u64>,
    },
    /// Measure the publication rate of a topic.
    Hz {
        topic: String,
        #[command(flatten)]
        server: ServerArg,
        /// Measurement window in seconds.
        #[arg(long, default_value_t = 2.0)]
        window: f64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ServerArg {
    /// Simulator address; defaults to 127.0.0.1 on $MVS_PORT or 23500.
    #[arg(long)]
    pub server: Option<String>,
}

impl ServerArg {
    pub fn address(&self) -> String {
        self.server.clone().unwrap_or_else(|| {
            let port = std::env::var("MVS_PORT").ok().and_then(|p| p.parse().ok()).unwrap_or(DEFAULT_PORT);
            format!("127.0.0.1:{port}")
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct LaunchOptions {
    pub world: PathBuf,
    /// Accepted for compatibility; the simulator has no built-in window.
    #[arg(long)]
    pub headless: bool,
    /// Realtime factor; 0 runs unthrottled. Defaults to the world's value.
    #[arg(long)]
    pub rtf: Option<f64>,
    /// Simulated seconds to run; runs until interrupted if absent.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Overrides the world's random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "MVS_PORT", default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, env = "MVS_WS_PORT", default_value_t = DEFAULT_WS_PORT)]
    pub ws_port: u16,
    /// Interface the comms server listens on.
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Directory that relative CSV log paths resolve against.
    #[arg(long, default_value = ".")]
    pub log_dir: PathBuf,
    /// Step vehicles and sensors on a single thread.
    #[arg(long)]
    pub sequential: bool,
}

pub fn run(cli: Cli) -> i32 {
    match cli.command {
        Command::Launch(opts) => launch::launch(&opts),
        Command::Topic { command } => match command {
            TopicCommand::List { server, json } => inspect::topic_list(&server.address(), json),
            TopicCommand::Echo { topic, server, count } => inspect::topic_echo(&server.address(), &topic, count),
            TopicCommand::Hz { topic, server, window } => inspect::topic_hz(&server.address(), &topic, window),
        },
        Command::Clients { server, json } => inspect::clients(&server.address(), json),
        Command::Call { service, request, server } => inspect::call(&server.address(), &service, &request),
    }
}

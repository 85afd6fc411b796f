use std::net::ToSocketAddrs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use hekate_core::{
    bench_spawn, bench_switch, sim_peers, ContentStore, RequestPattern, SimPeerConfig,
};

/// Microbenchmarks and a swarm load generator for the seeder.
#[derive(Parser)]
#[command(name = "bench", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pattern {
    Sequential,
    Random,
}

#[derive(Subcommand)]
enum Cmd {
    /// Spawn N parked tasks and report the marginal memory per task.
    Spawn {
        #[arg(long)]
        n: usize,
    },
    /// Ping-pong yields: P pairs of tasks, I yields each.
    Switch {
        #[arg(long)]
        pairs: usize,
        #[arg(long)]
        iters: u64,
    },
    /// Drive simulated peers against a running seeder and verify payloads.
    Peers {
        /// Number of concurrent peers.
        #[arg(long)]
        count: usize,
        /// Request order per peer.
        #[arg(long, value_enum, default_value_t = Pattern::Random)]
        pattern: Pattern,
        /// Seed for the random pattern.
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Seeder address, host:port.
        #[arg(long)]
        target: String,
        /// The same file the seeder serves, for payload verification.
        #[arg(long)]
        file: PathBuf,
        /// Must match the seeder's piece length.
        #[arg(long, default_value_t = 262_144)]
        piece_length: u32,
        /// Bytes per Request message.
        #[arg(long, default_value_t = 16_384)]
        chunk_length: u32,
        /// Requests per peer; 0 sweeps the whole file.
        #[arg(long, default_value_t = 0)]
        chunks_per_peer: usize,
        /// Requests kept in flight per peer.
        #[arg(long, default_value_t = 4)]
        pipeline: usize,
        /// Per-peer download ceiling in bytes/sec.
        #[arg(long)]
        rate_limit: Option<u64>,
        /// Abort the run after this many milliseconds.
        #[arg(long, default_value_t = 60_000)]
        time_limit_ms: u64,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    match Cli::parse().cmd {
        Cmd::Spawn { n } => {
            print!("{}", bench_spawn(n)?.render());
        }
        Cmd::Switch { pairs, iters } => {
            print!("{}", bench_switch(pairs, iters)?.render());
        }
        Cmd::Peers {
            count,
            pattern,
            seed,
            target,
            file,
            piece_length,
            chunk_length,
            chunks_per_peer,
            pipeline,
            rate_limit,
            time_limit_ms,
        } => {
            let store = Arc::new(
                ContentStore::open(&file, piece_length)
                    .with_context(|| format!("opening {}", file.display()))?,
            );
            let addr = target
                .to_socket_addrs()
                .with_context(|| format!("resolving {target}"))?
                .next()
                .with_context(|| format!("{target} resolved to no addresses"))?;
            let config = SimPeerConfig {
                peer_count: count,
                pattern: match pattern {
                    Pattern::Sequential => RequestPattern::Sequential,
                    Pattern::Random => RequestPattern::RandomChunks(seed),
                },
                rate_limit,
                chunk_length,
                chunks_per_peer,
                pipeline,
                time_limit: Duration::from_millis(time_limit_ms),
                ..SimPeerConfig::default()
            };
            let summary = sim_peers(&config, addr, store)?;
            print!("{}", summary.render());
            if summary.peers_completed < summary.peers || summary.timed_out {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}

use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::Parser;
use hekate_core::{spawn_seeder, ContentStore, Runtime, SeederConfig, SeederHandle};

/// Serve one file to swarm peers over the mini wire protocol.
#[derive(Parser)]
#[command(name = "seeder", version)]
struct Args {
    /// File to serve.
    #[arg(long)]
    file: PathBuf,
    /// Port to listen on (0 picks a free one).
    #[arg(long)]
    port: u16,
    /// Piece length in bytes; must be a power of two.
    #[arg(long, default_value_t = 262_144)]
    piece_length: u32,
    /// Fraction of connected peers unchoked at once.
    #[arg(long, default_value_t = 0.10)]
    unchoked_fraction: f64,
    /// Disconnect a peer silent for this many milliseconds.
    #[arg(long, default_value_t = 30_000)]
    idle_timeout_ms: u64,
    /// Choke window rotation period in milliseconds.
    #[arg(long, default_value_t = 1_000)]
    choke_tick_ms: u64,
    /// Print a stats block every rotation period.
    #[arg(long)]
    stats: bool,
}

static SHUTDOWN: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    SHUTDOWN.store(true, Ordering::SeqCst);
}

fn install_signal_handlers() {
    let handler = on_signal as *const () as libc::sighandler_t;
    unsafe {
        libc::signal(libc::SIGINT, handler);
        libc::signal(libc::SIGTERM, handler);
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args = Args::parse();
    if !(args.unchoked_fraction > 0.0 && args.unchoked_fraction <= 1.0) {
        anyhow::bail!("--unchoked-fraction must be in (0, 1]");
    }

    let store = Arc::new(
        ContentStore::open(&args.file, args.piece_length)
            .with_context(|| format!("opening {}", args.file.display()))?,
    );
    let listener = TcpListener::bind(("0.0.0.0", args.port))
        .with_context(|| format!("binding port {}", args.port))?;

    let rt = Runtime::new();
    let handle = spawn_seeder(
        &rt,
        listener,
        store.clone(),
        SeederConfig {
            choke_interval: Duration::from_millis(args.choke_tick_ms),
            unchoke_fraction: args.unchoked_fraction,
            idle_timeout: Duration::from_millis(args.idle_timeout_ms),
            ..SeederConfig::default()
        },
    )?;

    eprintln!(
        "seeding {} ({} bytes, {} pieces of {}) on port {}, info_hash {}",
        args.file.display(),
        store.len(),
        store.piece_count(),
        args.piece_length,
        handle.port(),
        hex(&store.info_hash()),
    );

    install_signal_handlers();
    let stopper: SeederHandle = handle.clone();
    std::thread::spawn(move || loop {
        if SHUTDOWN.load(Ordering::SeqCst) {
            eprintln!("shutting down");
            stopper.stop();
            break;
        }
        std::thread::sleep(Duration::from_millis(100));
    });

    if args.stats {
        let reporter = handle.clone();
        let period = Duration::from_millis(args.choke_tick_ms.max(100));
        rt.spawn(async move {
            loop {
                hekate_core::sleep(period).await?;
                let mut block = reporter.stats().render();
                block.push_str(&format!(
                    "unchoked_now={}\nquota_now={}\n",
                    reporter.unchoked_now(),
                    reporter.quota_now()
                ));
                println!("{block}");
                if reporter.accept_task().is_done() {
                    return Ok::<(), hekate_core::RtError>(());
                }
            }
        })?;
    }

    rt.run()?;

    print!("{}", handle.stats().render());
    print!("{}", rt.stats().render());
    Ok(())
}

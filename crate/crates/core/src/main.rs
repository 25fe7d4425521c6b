use clap::Parser;

#[global_allocator]
static ALLOC: npcrf::alloc_audit::CountingAllocator = npcrf::alloc_audit::CountingAllocator;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = npcrf::cli::Cli::parse();
    if let Err(e) = npcrf::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

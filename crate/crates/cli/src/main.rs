use clap::Parser;

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = cilk_cli::Cli::parse();
    cilk_cli::run(cli, &mut std::io::stdout().lock())
}

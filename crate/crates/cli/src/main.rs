use clap::Parser;

fn main() {
    let cli = capvae_cli::Cli::parse();
    if let Err(e) = capvae_cli::run(cli) {
        eprintln!("error: {e:#}");
        let code = if e.downcast_ref::<capvae_cli::UsageError>().is_some() {
            2
        } else {
            1
        };
        std::process::exit(code);
    }
}

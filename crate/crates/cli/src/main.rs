use clap::Parser;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let cli = mmnet_cli::Cli::parse();
    if let Err(e) = mmnet_cli::run(cli, &mut std::io::stdout(), &mut std::io::stderr()) {
        eprintln!("mmnet: {e}");
        std::process::exit(mmnet_cli::exit_code(&e));
    }
}

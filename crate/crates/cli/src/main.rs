use clap::Parser;

fn main() {
    let cli = vaanet_cli::Cli::parse();
    if let Err(e) = vaanet_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(vaanet_cli::exit_code(&e));
    }
}

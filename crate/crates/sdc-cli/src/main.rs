use clap::Parser;

fn main() {
    let cli = sdc_cli::Cli::parse();
    if let Err(err) = sdc_cli::run(cli) {
        eprintln!("{}", sdc_cli::error_json(&err));
        std::process::exit(1);
    }
}

use clap::Parser;

fn main() {
    let cli = subwalk::cli::Cli::parse();
    std::process::exit(subwalk::cli::run(cli));
}

use clap::Parser;

fn main() {
    let cli = condseg::cli::Cli::parse();
    std::process::exit(condseg::cli::run(&cli));
}

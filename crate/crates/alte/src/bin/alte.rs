use clap::Parser;

fn main() {
    let cli = alte::cli::Cli::parse();
    std::process::exit(alte::cli::execute(&cli));
}

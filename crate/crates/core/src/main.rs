use clap::Parser;

fn main() {
    let cli = blinddeconv::cli::Cli::parse();
    std::process::exit(blinddeconv::cli::run(&cli));
}

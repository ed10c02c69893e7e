use clap::Parser;

fn main() {
    let args = lorentz_cli::Args::parse();
    std::process::exit(lorentz_cli::run(&args));
}

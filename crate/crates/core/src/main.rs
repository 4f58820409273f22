use clap::Parser;

fn main() {
    let cli = clear_core::cli::Cli::parse();
    if let Err(e) = clear_core::cli::run(cli) {
        let msg = e.to_string().replace('\n', " ");
        eprintln!("error: {msg}");
        std::process::exit(1);
    }
}

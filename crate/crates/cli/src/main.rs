use clap::Parser;

fn main() {
    let cli = rqr_cli::args::Cli::parse();
    let code = match rqr_cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

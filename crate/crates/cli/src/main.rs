use clap::Parser;
use cwcl_cli::{exit_code, run, Cli, EXIT_OK, EXIT_VALIDATION};

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(&cli, &argv) {
        eprintln!("error: {e:#}");
        std::process::exit(exit_code(&e));
    }
}

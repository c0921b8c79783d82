use clap::Parser;
use scicore_harness::cli::{run, Cli};
use scicore_harness::HarnessError;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let stdout = std::io::stdout();
    if let Err(e) = run(cli, &mut stdout.lock()) {
        if e == HarnessError::ClosedOutput {
            return;
        }
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

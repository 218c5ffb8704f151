use std::process::ExitCode;

use dsrh::cli;

fn main() -> ExitCode {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    match cli::run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(ce) = e.downcast_ref::<clap::Error>() {
                if !ce.use_stderr() {
                    // --help / --version
                    let _ = ce.print();
                    return ExitCode::SUCCESS;
                }
                eprintln!("dsrh: error: {}", cli::one_line(&e));
                return ExitCode::from(2);
            }
            eprintln!("dsrh: error: {}", cli::one_line(&e));
            ExitCode::FAILURE
        }
    }
}

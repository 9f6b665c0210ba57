use std::io;
use std::panic;
use std::process::ExitCode;

fn main() -> ExitCode {
    let code = panic::catch_unwind(|| {
        let mut stdout = io::stdout();
        let mut stderr = io::stderr();
        coss::cli::run(std::env::args_os(), &mut stdout, &mut stderr)
    })
    .unwrap_or(coss::cli::EXIT_INTERNAL);
    ExitCode::from(code as u8)
}

use clap::Parser;
use clap::error::ErrorKind;

fn main() {
    env_logger::init();
    let cli = match tnf_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => tnf_cli::EXIT_OK,
                _ => tnf_cli::EXIT_SCHEMA,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(tnf_cli::run(cli));
}

use anyhow::Context as _;
use tmlab::error::CliError;

fn main() {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match tmlab::parse(&argv) {
        tmlab::Parsed::Run(cli) => cli,
        tmlab::Parsed::Exit(code) => std::process::exit(code),
    };
    let result = tmlab::execute(&cli, &argv).context("tmlab");
    if let Err(e) = result {
        let code = e.downcast_ref::<CliError>().map_or(2, CliError::exit_code);
        eprintln!("{e:#}");
        std::process::exit(code);
    }
}

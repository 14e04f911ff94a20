use clap::Parser;
use topoforge_cli::args::Cli;
use topoforge_cli::commands;

fn main() {
    // Usage errors exit with status 2 inside `parse`.
    let cli = Cli::parse();
    // The service logs each request by default.
    let serving = matches!(cli.command, topoforge_cli::args::Command::Serve(_));
    let level = match cli.verbose + u8::from(serving) {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("{}", e.to_line());
            std::process::exit(e.exit_code());
        }
    }
}

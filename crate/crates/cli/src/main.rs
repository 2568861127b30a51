use clap::Parser;

use armorbench_cli::{init_logging, run, Cli};

fn main() {
    let cli = Cli::parse();
    let result = cli.resolve_config().and_then(|cfg| {
        init_logging(cfg.log_timestamps);
        run(&cli.command, &cfg)
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

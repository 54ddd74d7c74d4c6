use clap::Parser;

use hessianscope_cli::commands::{self, Cli};

fn main() {
    let cli = Cli::parse();
    let outcome = commands::configure_threads().and_then(|()| commands::execute(cli.command));
    match outcome {
        Ok(dir) if dir.as_os_str().is_empty() => {}
        Ok(dir) => println!("{}", dir.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

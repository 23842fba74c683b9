use clap::Parser;

fn main() {
    let cli = segflow_cli::Cli::parse();
    match segflow_cli::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(err) => {
            eprintln!("error message=\"{err:#}\"");
            std::process::exit(1);
        }
    }
}

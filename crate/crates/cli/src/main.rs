use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = distill_cli::Cli::parse();
    match distill_cli::run(cli) {
        Ok(out) => {
            if let Some(text) = out.text {
                print!("{text}");
            }
            println!("{}", serde_json::to_string_pretty(&out.summary).expect("summary serializes"));
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            std::process::exit(e.kind.exit_code());
        }
    }
}

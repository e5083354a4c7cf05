fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("APA_LOG", "warn")).init();
    let env: Vec<(String, String)> = std::env::vars().collect();
    std::process::exit(apa_cli::main_with(std::env::args_os(), &env));
}

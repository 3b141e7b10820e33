fn main() {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("REPSCOPE_LOG", "warn")).try_init();
    std::process::exit(repscope_cli::run(std::env::args_os()));
}

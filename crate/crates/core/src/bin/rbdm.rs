fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Err(err) = rbdm::cli_io::commands::run_from_args(std::env::args_os()) {
        eprintln!("error: {err:#}");
        std::process::exit(rbdm::cli_io::commands::exit_code(&err));
    }
}

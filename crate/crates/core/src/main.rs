use grmp_core::cli;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match cli::run(std::env::args_os()) {
        Ok(()) => cli::EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    };
    std::process::exit(code);
}

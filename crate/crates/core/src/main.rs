use std::panic;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let code =
        panic::catch_unwind(|| fewshot_nlu::cli::main_with_args(std::env::args_os())).unwrap_or(2);
    std::process::exit(code);
}

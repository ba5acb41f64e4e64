use molegraph::{cli, par};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    par::init_threads(cli::threads_from_env());
    std::process::exit(cli::run(std::env::args_os()));
}

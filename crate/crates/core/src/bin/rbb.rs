fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    rbb::tune_allocator();
    std::process::exit(rbb::workbench::cli::run(std::env::args_os()));
}

fn main() {
    epimisr::cli::init_logging();
    std::process::exit(epimisr::cli::main_with_args(std::env::args_os()));
}

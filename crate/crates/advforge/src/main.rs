fn main() {
    std::process::exit(advforge::cli::run(std::env::args_os()));
}

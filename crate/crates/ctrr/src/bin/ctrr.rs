fn main() {
    std::process::exit(ctrr::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(me_lab::cli::run_from(std::env::args_os()));
}

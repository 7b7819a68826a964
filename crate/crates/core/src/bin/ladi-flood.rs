fn main() {
    std::process::exit(ladi_flood::cli::run(std::env::args_os()));
}

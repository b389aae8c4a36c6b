fn main() {
    std::process::exit(gaia_core::cli::run(std::env::args_os()));
}

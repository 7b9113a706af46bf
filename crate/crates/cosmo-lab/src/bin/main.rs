fn main() {
    std::process::exit(cosmo_lab::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(j2r_core::cli::run_from_env());
}

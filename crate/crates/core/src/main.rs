fn main() {
    std::process::exit(dynaflow::cli::run_from_env());
}

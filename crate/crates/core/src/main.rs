fn main() {
    std::process::exit(vpr_core::cli::run(std::env::args_os()));
}

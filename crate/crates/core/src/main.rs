fn main() {
    std::process::exit(aqa_core::cli::run(std::env::args_os()));
}

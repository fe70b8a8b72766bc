fn main() {
    std::process::exit(distillrag::cli::run(std::env::args_os()));
}

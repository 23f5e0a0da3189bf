fn main() {
    std::process::exit(ggvit::cli::run(std::env::args_os()));
}

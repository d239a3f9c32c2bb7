fn main() {
    std::process::exit(chexfusion::cli::run(std::env::args_os()));
}

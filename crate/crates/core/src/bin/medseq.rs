fn main() {
    std::process::exit(medseq::cli::run(std::env::args_os()));
}

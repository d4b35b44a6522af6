fn main() {
    std::process::exit(segcodec::cli::run(std::env::args_os()));
}

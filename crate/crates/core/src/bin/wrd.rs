fn main() {
    std::process::exit(wrdprobe::cli::run(std::env::args_os()));
}

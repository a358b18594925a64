fn main() {
    std::process::exit(mssmf::cli::run(std::env::args_os()));
}

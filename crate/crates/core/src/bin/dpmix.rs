fn main() {
    std::process::exit(dpmix::cli::run(std::env::args_os()));
}

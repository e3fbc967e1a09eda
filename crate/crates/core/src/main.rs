fn main() {
    std::process::exit(samrec::cli::run(std::env::args_os()));
}

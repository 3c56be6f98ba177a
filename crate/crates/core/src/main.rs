fn main() {
    std::process::exit(gplvm::cli::run(std::env::args_os()));
}

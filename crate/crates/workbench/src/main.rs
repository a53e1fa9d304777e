fn main() {
    std::process::exit(clipladder::cli::main(std::env::args_os()));
}

fn main() {
    std::process::exit(fedd2p::cli::main_with_args(std::env::args_os()));
}

fn main() {
    std::process::exit(jumpmix::cli::main_with_args(std::env::args_os()));
}

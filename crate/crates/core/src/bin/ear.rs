fn main() {
    std::process::exit(ear::cli::cli_dispatch(std::env::args_os()));
}

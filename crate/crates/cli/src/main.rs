fn main() {
    std::process::exit(icrl_cli::run(std::env::args_os()));
}

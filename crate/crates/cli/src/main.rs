fn main() {
    std::process::exit(ctes_cli::run(std::env::args_os()));
}

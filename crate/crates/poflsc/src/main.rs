fn main() {
    std::process::exit(poflsc::cli::run(std::env::args_os()));
}

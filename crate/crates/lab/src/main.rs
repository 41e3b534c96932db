fn main() {
    std::process::exit(reina_lab::cli::run(std::env::args_os()));
}

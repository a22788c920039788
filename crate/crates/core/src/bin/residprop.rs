fn main() {
    std::process::exit(residprop::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(tkplanes::cli::run(std::env::args_os()));
}

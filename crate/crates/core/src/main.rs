fn main() {
    std::process::exit(hfres::cli::run(std::env::args_os()));
}

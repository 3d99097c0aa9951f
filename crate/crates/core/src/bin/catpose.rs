fn main() {
    std::process::exit(catpose::cli::run(std::env::args_os()));
}

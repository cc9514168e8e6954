fn main() {
    std::process::exit(notelab_core::cli::run(std::env::args_os()));
}

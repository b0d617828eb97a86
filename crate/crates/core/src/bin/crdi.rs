fn main() {
    std::process::exit(crdi::workbench::cli::run(std::env::args_os()));
}

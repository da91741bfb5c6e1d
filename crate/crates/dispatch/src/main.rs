fn main() {
    std::process::exit(tcl_dispatch::cli::main_with(std::env::args_os()));
}

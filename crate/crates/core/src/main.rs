fn main() {
    std::process::exit(cem_dg::cli::main_with_args(std::env::args_os()));
}

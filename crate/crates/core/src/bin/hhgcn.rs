fn main() {
    std::process::exit(hhgcn::runner::cli_main(std::env::args_os()));
}

fn main() {
    std::process::exit(dpf_cli::cli_main(std::env::args_os()));
}

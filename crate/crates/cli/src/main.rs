fn main() {
    std::process::exit(sar_cli::run_command(std::env::args_os()));
}

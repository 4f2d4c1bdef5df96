fn main() {
    std::process::exit(lightcrl_cli::run(std::env::args_os()));
}

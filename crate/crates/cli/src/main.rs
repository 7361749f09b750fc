fn main() {
    std::process::exit(optsensor_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(salience_cli::run(std::env::args_os()));
}

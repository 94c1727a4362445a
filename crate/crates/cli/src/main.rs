fn main() {
    std::process::exit(moeforge_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(bess_game::cli::run(std::env::args_os()));
}

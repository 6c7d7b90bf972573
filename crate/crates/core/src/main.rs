fn main() {
    std::process::exit(latent_talker::cli::run(std::env::args_os()));
}

fn main() {
    env_logger::init();
    std::process::exit(critic_lab::cli::run_main());
}

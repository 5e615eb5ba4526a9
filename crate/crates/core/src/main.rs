fn main() {
    std::process::exit(npc_core::cli::run_from_args(std::env::args_os()));
}

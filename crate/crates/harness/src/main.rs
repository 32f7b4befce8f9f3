fn main() {
    std::process::exit(mrvpc_harness::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(segpatch_cli::run(std::env::args_os()));
}

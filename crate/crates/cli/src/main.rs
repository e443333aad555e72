fn main() {
    std::process::exit(memgauge::run_cli(std::env::args_os()));
}

fn main() {
    std::process::exit(vortex_lab::harness::cli_main(std::env::args().skip(1).collect()));
}

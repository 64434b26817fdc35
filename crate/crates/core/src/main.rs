fn main() {
    std::process::exit(memescope::pipeline::cli::run());
}

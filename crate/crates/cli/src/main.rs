fn main() {
    std::process::exit(adsorbtext_cli::run(std::env::args()));
}

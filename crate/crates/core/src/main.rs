fn main() {
    std::process::exit(tactisense::run_cli());
}

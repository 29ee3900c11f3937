fn main() {
    std::process::exit(quantprobe::cli::main());
}

fn main() {
    std::process::exit(latprobe::run(std::env::args_os()));
}

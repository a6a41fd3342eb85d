fn main() {
    std::process::exit(tandem_kd::cli::run(std::env::args_os()) as i32);
}

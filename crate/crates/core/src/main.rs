fn main() {
    std::process::exit(continual_anomaly::cli::dispatch(std::env::args_os()));
}

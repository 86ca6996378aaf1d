fn main() { cerec::cli::run_main(); }

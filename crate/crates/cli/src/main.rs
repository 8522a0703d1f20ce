fn main() {
    std::process::exit(mdb_cli::run(std::env::args_os()));
}

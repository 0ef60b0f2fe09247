fn main() {
    match landmark_attack_cli::run(std::env::args_os()) {
        Ok(_) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

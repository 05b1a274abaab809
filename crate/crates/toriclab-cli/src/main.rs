fn main() {
    eprintln!("toriclab: not wired up yet");
    std::process::exit(3);
}

fn main() {
    // CLI dispatch is filled in once the library surface is complete.
    std::process::exit(0);
}

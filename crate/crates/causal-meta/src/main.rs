fn main() {
    causal_meta::cli::run();
}

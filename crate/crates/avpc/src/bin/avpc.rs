fn main() {
    avpc::cli::main();
}

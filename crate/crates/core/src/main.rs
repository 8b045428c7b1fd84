fn main() {
    square_mamba::cli::main_with_exit_codes();
}

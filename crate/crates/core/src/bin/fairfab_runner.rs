//! In-sandbox servable runner. See `fair_fabric::tasking::runner`.

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = fair_fabric::tasking::runner::run(&args, &mut std::io::stdin().lock(), &mut std::io::stdout().lock());
    std::process::exit(code);
}

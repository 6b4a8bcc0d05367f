use fdx_cli::{parse_args, run, EXIT_OK, EXIT_USAGE};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let spec = match parse_args(std::env::args_os()) {
        Ok(spec) => spec,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(run(&spec));
}

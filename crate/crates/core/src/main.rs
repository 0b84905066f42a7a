// glibc's allocator fragments badly under the mix of long-lived replay
// observations and short-lived batch buffers.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    std::process::exit(seqpick::harness::run(std::env::args_os()));
}

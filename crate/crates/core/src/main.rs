// Training allocates and frees many large activation buffers per step; the
// system allocator returns them to the OS each time and page-faults them back.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(condseg::cli::main_with_args(std::env::args_os()));
}

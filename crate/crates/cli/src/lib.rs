#[global_allocator]
static GLOBAL: alloc::CountingAlloc = alloc::CountingAlloc;

pub mod alloc;
pub mod bench;
pub mod config;
pub mod error;
pub mod plot;
pub mod labels;
pub mod runs;
pub mod verify;

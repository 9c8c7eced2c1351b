#pragma once

namespace kddetr {

// Keeps freed tensor buffers in the heap instead of returning them to the OS
// after every step (glibc otherwise mmaps and unmaps each large buffer).
void configure_allocator();

}  // namespace kddetr

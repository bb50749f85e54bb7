#include <cstdio>

int main(int argc, char** argv) {
  // replaced once the cli module lands
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "error: cli: not yet wired\n");
  return 2;
}

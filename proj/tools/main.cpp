#include <cstdio>

int main() {
  std::puts("taskdiff: subcommands not wired up yet");
  return 1;
}

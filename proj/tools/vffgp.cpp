#include <cstdio>

int main() {
  std::puts("vffgp: command-line interface not wired up yet");
  return 1;
}

#include <cstdio>

int main() {
  std::puts("cdl: placeholder");
  return 0;
}

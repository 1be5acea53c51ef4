#include <cstdio>

int main() {
    std::puts("s4rec: CLI under construction");
    return 0;
}

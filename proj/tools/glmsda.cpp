// placeholder; full CLI lands with the trainer
#include <cstdio>

int main() {
    std::puts("glmsda: not wired up yet");
    return 1;
}

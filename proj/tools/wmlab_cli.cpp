#include <cstdio>
int main() { std::puts("wmlab: subcommands land here"); return 0; }

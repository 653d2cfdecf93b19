#include <cstdio>
int main() { std::printf("cfsr cli placeholder\n"); return 0; }

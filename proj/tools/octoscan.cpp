#include <cstdio>
int main(){ std::puts("octoscan placeholder"); return 2; }

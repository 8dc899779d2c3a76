#include <cstdio>
int main() { std::puts("uniclam: placeholder"); return 0; }

/* alloca(10) used as an array of ints and filled with 17 of them;
 * whether the native canary fires depends on the optimization level. */
typedef unsigned long size_t;

void *memset(void *dest, int c, size_t n);
void *memcpy(void *dest, const void *src, size_t n);
int puts(const char *s);


static void printIntLine(int value)
{
    char buf[16];
    char *p = buf + sizeof(buf) - 1;
    unsigned int u = value < 0 ? 0u - (unsigned int)value : (unsigned int)value;
    *p = '\0';
    do {
        *--p = (char)('0' + u % 10);
        u /= 10;
    } while (u);
    if (value < 0)
        *--p = '-';
    puts(p);
}

void cwe121_alloca_loop_bad(void)
{
    int *data = (int *)__builtin_alloca(10);
    int source[17] = {0};
    for (size_t i = 0; i < 17; i++) {
        data[i] = source[i];
    }
    printIntLine(data[10]);
}

int main(void)
{
    cwe121_alloca_loop_bad();
    return 0;
}

/* Variant 01 with the allocation under a literal always-true conditional. */
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

void cwe131_memcpy_02_bad(void)
{
    int *data;
    data = 0;
    if (1) {
        data = (int *)__builtin_alloca(10);
    }
    {
        int source[10] = {0};
        memcpy(data, source, 10 * sizeof(int));
        printIntLine(data[0]);
    }
}

int main(void)
{
    cwe131_memcpy_02_bad();
    return 0;
}

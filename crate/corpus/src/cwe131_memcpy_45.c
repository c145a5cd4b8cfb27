/* The overflowing copy happens in a second function that reaches the
 * alloca'd buffer through a file-scope static pointer. */
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

static int *cwe131_memcpy_45_badData;

__attribute__((noinline))
static void badSink(void)
{
    int *data = cwe131_memcpy_45_badData;
    {
        int source[10] = {0};
        memcpy(data, source, 10 * sizeof(int));
        printIntLine(data[0]);
    }
}

void cwe131_memcpy_45_bad(void)
{
    int *data;
    data = 0;
    data = (int *)__builtin_alloca(10);
    cwe131_memcpy_45_badData = data;
    badSink();
}

int main(void)
{
    cwe131_memcpy_45_bad();
    return 0;
}

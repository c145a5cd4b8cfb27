/* 100 chars copied by a loop into a 50-byte alloca buffer. */
typedef unsigned long size_t;

void *memset(void *dest, int c, size_t n);
void *memcpy(void *dest, const void *src, size_t n);
int puts(const char *s);

static void printLine(const char *line)
{
    if (line != 0)
        puts(line);
}

void cwe121_char_alloca_loop_bad(void)
{
    char *data;
    char *dataBadBuffer = (char *)__builtin_alloca(50 * sizeof(char));
    data = dataBadBuffer;
    data[0] = '\0';
    {
        size_t i;
        char source[100];
        memset(source, 'C', 100 - 1);
        source[100 - 1] = '\0';
        for (i = 0; i < 100; i++) {
            data[i] = source[i];
        }
        data[100 - 1] = '\0';
        printLine(data);
    }
}

int main(void)
{
    cwe121_char_alloca_loop_bad();
    return 0;
}

/* Stack buffer overflow: 100 chars copied into a 50-char stack buffer
 * by an explicit loop, followed by a terminator write at index 99. */
typedef unsigned long size_t;

void *memset(void *dest, int c, size_t n);
void *memcpy(void *dest, const void *src, size_t n);
int puts(const char *s);

static void printLine(const char *line)
{
    if (line != 0)
        puts(line);
}

void cwe121_char_declare_loop_bad(void)
{
    char *data;
    char dataBadBuffer[50];
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
    cwe121_char_declare_loop_bad();
    return 0;
}

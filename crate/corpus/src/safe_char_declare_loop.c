/* Control: same shape as the char loop overflow, but the destination is
 * large enough (50 chars copied into a 50-char buffer). */
typedef unsigned long size_t;

void *memset(void *dest, int c, size_t n);
void *memcpy(void *dest, const void *src, size_t n);
int puts(const char *s);

static void printLine(const char *line)
{
    if (line != 0)
        puts(line);
}

void safe_char_declare_loop_good(void)
{
    char *data;
    char dataGoodBuffer[50];
    data = dataGoodBuffer;
    data[0] = '\0';
    {
        size_t i;
        char source[50];
        memset(source, 'C', 50 - 1);
        source[50 - 1] = '\0';
        for (i = 0; i < 50; i++) {
            data[i] = source[i];
        }
        data[50 - 1] = '\0';
        printLine(data);
    }
}

int main(void)
{
    safe_char_declare_loop_good();
    return 0;
}

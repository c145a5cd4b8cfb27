/* 100 wide chars copied by a loop into a 50-wide-char stack buffer. */
typedef unsigned long size_t;
typedef int wchar_t;

wchar_t *wmemset(wchar_t *dest, wchar_t c, size_t n);
int puts(const char *s);

static void printWLine(const wchar_t *line)
{
    char narrow[128];
    size_t i = 0;
    if (line == 0)
        return;
    while (line[i] != 0 && i < sizeof(narrow) - 1) {
        narrow[i] = (char)line[i];
        i++;
    }
    narrow[i] = '\0';
    puts(narrow);
}

void cwe121_wchar_t_declare_loop_bad(void)
{
    wchar_t *data;
    wchar_t dataBadBuffer[50];
    data = dataBadBuffer;
    data[0] = L'\0';
    {
        size_t i;
        wchar_t source[100];
        wmemset(source, L'C', 100 - 1);
        source[100 - 1] = L'\0';
        for (i = 0; i < 100; i++) {
            data[i] = source[i];
        }
        data[100 - 1] = L'\0';
        printWLine(data);
    }
}

int main(void)
{
    cwe121_wchar_t_declare_loop_bad();
    return 0;
}

/* Filed under heap overflows, but the overflowing buffer is on the stack:
 * a 100-wide-char heap string is concatenated into a 50-wide-char local. */
typedef unsigned long size_t;
typedef int wchar_t;

void *malloc(size_t n);
void free(void *p);
void exit(int code);
wchar_t *wmemset(wchar_t *dest, wchar_t c, size_t n);
wchar_t *wcscat(wchar_t *dest, const wchar_t *src);
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

void cwe122_wchar_t_cat_bad(void)
{
    wchar_t *data;
    data = (wchar_t *)malloc(100 * sizeof(wchar_t));
    if (data == 0) {
        exit(-1);
    }
    wmemset(data, L'A', 100 - 1);
    data[100 - 1] = L'\0';
    {
        wchar_t dest[50] = L"";
        wcscat(dest, data);
        printWLine(data);
    }
    free(data);
}

int main(void)
{
    cwe122_wchar_t_cat_bad();
    return 0;
}

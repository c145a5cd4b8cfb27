/* Minimal libc subset for freestanding wasm32 builds of the corpus.
 * Only what the cases call is provided. I/O goes through WASI fd_write. */

typedef unsigned long size_t;
typedef int wchar_t;

typedef struct {
    const void *buf;
    size_t len;
} ciovec_t;

__attribute__((import_module("wasi_snapshot_preview1"), import_name("fd_write")))
int __wasi_fd_write(int fd, const ciovec_t *iovs, size_t iovs_len, size_t *nwritten);

__attribute__((import_module("wasi_snapshot_preview1"), import_name("proc_exit"), noreturn))
void __wasi_proc_exit(int code);

/* Declared so per-run-random hardening has an entropy import to bind to. */
__attribute__((import_module("wasi_snapshot_preview1"), import_name("random_get")))
int __wasi_random_get(void *buf, size_t len);

__attribute__((export_name("shim_entropy")))
int shim_entropy(void *buf, size_t len)
{
    return __wasi_random_get(buf, len);
}

extern unsigned char __heap_base;
static unsigned char *heap_top = &__heap_base;

__attribute__((no_builtin))
void *memset(void *dest, int c, size_t n)
{
    unsigned char *p = dest;
    while (n--)
        *p++ = (unsigned char)c;
    return dest;
}

__attribute__((no_builtin))
void *memcpy(void *dest, const void *src, size_t n)
{
    unsigned char *d = dest;
    const unsigned char *s = src;
    while (n--)
        *d++ = *s++;
    return dest;
}

__attribute__((no_builtin))
size_t strlen(const char *s)
{
    size_t n = 0;
    while (s[n])
        n++;
    return n;
}

__attribute__((no_builtin))
char *strcpy(char *dest, const char *src)
{
    char *d = dest;
    while ((*d++ = *src++))
        ;
    return dest;
}

__attribute__((no_builtin))
size_t wcslen(const wchar_t *s)
{
    size_t n = 0;
    while (s[n])
        n++;
    return n;
}

__attribute__((no_builtin))
wchar_t *wmemset(wchar_t *dest, wchar_t c, size_t n)
{
    for (size_t i = 0; i < n; i++)
        dest[i] = c;
    return dest;
}

__attribute__((no_builtin))
wchar_t *wcscat(wchar_t *dest, const wchar_t *src)
{
    wchar_t *d = dest + wcslen(dest);
    while ((*d++ = *src++))
        ;
    return dest;
}

void *malloc(size_t n)
{
    unsigned char *p = heap_top;
    heap_top += (n + 15) & ~(size_t)15;
    return p;
}

void free(void *p)
{
    (void)p;
}

void exit(int code)
{
    __wasi_proc_exit(code);
}

/* Static so that puts needs no stack frame of its own. */
static ciovec_t puts_iov[2];
static size_t puts_written;

int puts(const char *s)
{
    puts_iov[0].buf = s;
    puts_iov[0].len = strlen(s);
    puts_iov[1].buf = "\n";
    puts_iov[1].len = 1;
    return __wasi_fd_write(1, puts_iov, 2, &puts_written) == 0 ? 0 : -1;
}

int main(void);

void _start(void)
{
    __wasi_proc_exit(main());
}

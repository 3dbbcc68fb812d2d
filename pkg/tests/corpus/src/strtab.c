/* Keyword lookup through a sorted string table and bsearch. */
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

static const char *const keywords[] = {
    "auto", "break", "case", "char", "const", "continue", "default", "do",
    "else", "enum", "extern", "for", "goto", "if", "int", "long", "register",
    "return", "short", "signed", "sizeof", "static", "struct", "switch",
    "typedef", "union", "unsigned", "void", "volatile", "while",
};
#define NKW (sizeof keywords / sizeof keywords[0])

static int cmp(const void *key, const void *elem)
{
    return strcmp((const char *)key, *(const char *const *)elem);
}

static unsigned counts[NKW];

int main(void)
{
    char word[128];
    int unknown = 0;
    while (scanf("%127s", word) == 1) {
        const char *const *hit = bsearch(word, keywords, NKW, sizeof keywords[0], cmp);
        if (hit)
            counts[hit - keywords]++;
        else
            unknown++;
    }
    for (unsigned i = 0; i < NKW; i++)
        if (counts[i])
            printf("%s=%u\n", keywords[i], counts[i]);
    printf("unknown=%d\n", unknown);
    return 0;
}

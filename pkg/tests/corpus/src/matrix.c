/* Integer matrix products over global arrays. */
#include <stdio.h>
#include <stdlib.h>

#define D 6
static int a[D][D];
static int b[D][D] = {
    {1, 2, 3, 4, 5, 6}, {6, 5, 4, 3, 2, 1}, {1, 0, 1, 0, 1, 0},
    {0, 1, 0, 1, 0, 1}, {2, 2, 2, 2, 2, 2}, {3, 1, 4, 1, 5, 9},
};
static long c[D][D];

static void fill(int seed)
{
    for (int i = 0; i < D; i++)
        for (int j = 0; j < D; j++)
            a[i][j] = (seed * (i + 1) + j * 7) % 11 - 5;
}

static void mul(void)
{
    for (int i = 0; i < D; i++)
        for (int j = 0; j < D; j++) {
            long s = 0;
            for (int k = 0; k < D; k++)
                s += (long)a[i][k] * b[k][j];
            c[i][j] = s;
        }
}

static long trace(void)
{
    long t = 0;
    for (int i = 0; i < D; i++)
        t += c[i][i];
    return t;
}

int main(int argc, char **argv)
{
    int seed = argc > 1 ? atoi(argv[1]) : 3;
    fill(seed);
    mul();
    for (int i = 0; i < D; i++) {
        for (int j = 0; j < D; j++)
            printf("%5ld", c[i][j]);
        putchar('\n');
    }
    printf("trace %ld\n", trace());
    return 0;
}

/* Out-of-unit globals used by the always-true conditional variants.
 * Kept in a separate translation unit so the compiler cannot fold them. */

const int GLOBAL_CONST_TRUE = 1;
const int GLOBAL_CONST_FALSE = 0;
const int GLOBAL_CONST_FIVE = 5;

int globalTrue = 1;
int globalFalse = 0;
int globalFive = 5;

int globalReturnsTrue(void)
{
    return 1;
}

int globalReturnsFalse(void)
{
    return 0;
}

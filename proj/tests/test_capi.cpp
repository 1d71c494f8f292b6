#include <doctest.h>

TEST_SUITE("capi") {}

//! Holds the `acceptance` test target, which exercises the whole library.

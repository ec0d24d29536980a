//! Holds the `acceptance` test target. It lives in its own package so that it
//! runs after every other test binary in the workspace: a failing criterion
//! then cannot hide the results of the regular tests.

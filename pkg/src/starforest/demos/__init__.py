"""End-to-end uses of the library: ghost-exchange SpMV, submatrix column selection, ping-pong."""

# Tests for rtcan

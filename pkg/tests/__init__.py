"""
Test suite for sepfilter

Contains unit tests and end-to-end command-line and Monte-Carlo tests.
"""

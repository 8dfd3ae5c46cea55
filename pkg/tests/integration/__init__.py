"""Integration tests for sepfilter"""

"""Unit tests for sepfilter"""

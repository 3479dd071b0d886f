"""
Test package for verirl
"""

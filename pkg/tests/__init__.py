"""
Tests for chaosflow.
"""

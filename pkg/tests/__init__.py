"""Test suite for switching-pcem"""

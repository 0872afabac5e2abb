"""
Test package for the UMBD refiner.
"""

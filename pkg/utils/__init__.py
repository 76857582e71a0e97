"""
Utility modules for configuration, logging and errors.
"""

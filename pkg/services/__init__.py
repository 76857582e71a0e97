"""
Service layer: pipeline stages and synthetic scans.
"""
